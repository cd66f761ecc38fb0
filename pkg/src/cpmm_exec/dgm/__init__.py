from .network import Architecture, NetworkParams, forward, time_derivative

__all__ = ["Architecture", "NetworkParams", "forward", "time_derivative"]
