"""Gated DGM network on a flat float64 parameter vector.

Forward pass, for input rows x:

    S1    = tanh(W1 x + b1)
    Z     = tanh(Uz x + Wz S + bz)       G = tanh(Ug x + Wg S + bg)
    R     = tanh(Ur x + Wr S + br)       H = tanh(Uh x + Wh (S*R) + bh)
    S_new = (1 - G) * H + Z * S
    u     = w . S_{L+1} + b

The derivative with respect to the first input coordinate (normalized time)
is carried forward alongside the values as a dual part; the reverse pass
differentiates through both, which is what the PDE loss needs.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

Z_, G_, R_, H_ = range(4)  # gate order inside each layer block


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 5
    width: int = 64
    n_layers: int = 3

    def __post_init__(self):
        if self.input_dim < 1 or self.width < 1 or self.n_layers < 0:
            raise ValueError(f"bad architecture {self}")

    def layout(self):
        d, w, L = self.input_dim, self.width, self.n_layers
        return [
            ("W1", (w, d)),
            ("b1", (w,)),
            ("U", (L, 4, w, d)),
            ("W", (L, 4, w, w)),
            ("B", (L, 4, w)),
            ("w_out", (w,)),
            ("b_out", (1,)),
        ]

    @property
    def n_params(self) -> int:
        d, w, L = self.input_dim, self.width, self.n_layers
        return w * d + w + L * 4 * (w * d + w * w + w) + w + 1


def _views(flat, arch: Architecture) -> dict:
    out, k = {}, 0
    for name, shape in arch.layout():
        size = int(np.prod(shape))
        out[name] = flat[k : k + size].reshape(shape)
        k += size
    return out


class NetworkParams:
    """Parameters as one flat vector plus named views into it."""

    def __init__(self, arch: Architecture, flat=None):
        self.arch = arch
        if flat is None:
            flat = np.zeros(arch.n_params)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {flat.shape}")
        self.flat = flat
        self.v = _views(self.flat, arch)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, self.flat.copy())

    @classmethod
    def xavier(cls, arch: Architecture, rng) -> "NetworkParams":
        """Xavier-uniform weights (gain 1), zero biases."""
        p = cls(arch)

        def fill(a, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            a[...] = rng.uniform(-lim, lim, size=a.shape)

        d, w = arch.input_dim, arch.width
        fill(p.v["W1"], d, w)
        for layer in range(arch.n_layers):
            for gate in range(4):
                fill(p.v["U"][layer, gate], d, w)
                fill(p.v["W"][layer, gate], w, w)
        fill(p.v["w_out"], w, 1)
        return p


# ---------------------------------------------------------------------------
# forward / reverse


def _forward(v, X, tangent: bool, keep: bool):
    w = v["b1"].shape[0]
    A1 = X @ v["W1"].T + v["b1"]
    S = np.tanh(A1)
    dS = (1.0 - S * S) * v["W1"][:, 0] if tangent else None
    cache = {"X": X, "S1": S, "layers": []} if keep else None
    for layer in range(v["U"].shape[0]):
        U3 = v["U"][layer, :3].reshape(3 * w, -1)
        W3 = v["W"][layer, :3].reshape(3 * w, w)
        Uh, Wh = v["U"][layer, H_], v["W"][layer, H_]
        act = np.tanh(X @ U3.T + S @ W3.T + v["B"][layer, :3].reshape(-1))
        Z, G, R = act[:, :w], act[:, w : 2 * w], act[:, 2 * w :]
        SR = S * R
        H = np.tanh(X @ Uh.T + SR @ Wh.T + v["B"][layer, H_])
        S_new = (1.0 - G) * H + Z * S
        if tangent:
            dpre = U3[:, 0] + dS @ W3.T
            dact = (1.0 - act * act) * dpre
            dZ, dG, dR = dact[:, :w], dact[:, w : 2 * w], dact[:, 2 * w :]
            dSR = dS * R + S * dR
            dpreH = Uh[:, 0] + dSR @ Wh.T
            dH = (1.0 - H * H) * dpreH
            dS_new = -dG * H + (1.0 - G) * dH + dZ * S + Z * dS
        if keep:
            ent = {"S": S, "act": act, "SR": SR, "H": H}
            if tangent:
                ent.update(dS=dS, dpre=dpre, dact=dact, dSR=dSR, dpreH=dpreH, dH=dH)
            cache["layers"].append(ent)
        S = S_new
        if tangent:
            dS = dS_new
    y = S @ v["w_out"] + v["b_out"][0]
    dy = dS @ v["w_out"] if tangent else None
    if keep:
        cache["S_out"] = S
        cache["dS_out"] = dS
    return y, dy, cache


def _backward(v, cache, gy, gdy, grad_flat, arch: Architecture):
    """Accumulate d(sum gy*u + gdy*du/ds)/dparams into ``grad_flat``."""
    g = _views(grad_flat, arch)
    w = arch.width
    X = cache["X"]
    tangent = gdy is not None
    S_out, dS_out = cache["S_out"], cache["dS_out"]
    g["w_out"] += S_out.T @ gy
    g["b_out"][0] += gy.sum()
    gS = np.outer(gy, v["w_out"])
    gdS = None
    if tangent:
        g["w_out"] += dS_out.T @ gdy
        gdS = np.outer(gdy, v["w_out"])

    for layer in reversed(range(len(cache["layers"]))):
        c = cache["layers"][layer]
        S, act, SR, H = c["S"], c["act"], c["SR"], c["H"]
        Z, G, R = act[:, :w], act[:, w : 2 * w], act[:, 2 * w :]
        U3 = v["U"][layer, :3].reshape(3 * w, -1)
        W3 = v["W"][layer, :3].reshape(3 * w, w)
        Wh = v["W"][layer, H_]

        # S_new = (1 - G) H + Z S
        gG = -gS * H
        gH = gS * (1.0 - G)
        gZ = gS * S
        gS_in = gS * Z
        if tangent:
            dS, dH, dpreH, dSR = c["dS"], c["dH"], c["dpreH"], c["dSR"]
            dact, dpre = c["dact"], c["dpre"]
            dZ, dG, dR = dact[:, :w], dact[:, w : 2 * w], dact[:, 2 * w :]
            # dS_new = -dG H + (1 - G) dH + dZ S + Z dS
            gdG = -gdS * H
            gH -= gdS * dG
            gG -= gdS * dH
            gdH = gdS * (1.0 - G)
            gdZ = gdS * S
            gS_in += gdS * dZ
            gZ += gdS * dS
            gdS_in = gdS * Z
            # dH = (1 - H^2) dpreH
            gH += gdH * (-2.0 * H * dpreH)
            gdpreH = gdH * (1.0 - H * H)
        gpreH = gH * (1.0 - H * H)

        # preH = X Uh^T + SR Wh^T + bh
        g["U"][layer, H_] += gpreH.T @ X
        g["W"][layer, H_] += gpreH.T @ SR
        g["B"][layer, H_] += gpreH.sum(axis=0)
        gSR = gpreH @ Wh
        if tangent:
            # dpreH = e_s Uh^T + dSR Wh^T
            g["U"][layer, H_][:, 0] += gdpreH.sum(axis=0)
            g["W"][layer, H_] += gdpreH.T @ dSR
            gdSR = gdpreH @ Wh

        # SR = S R
        gS_in += gSR * R
        gR = gSR * S
        if tangent:
            # dSR = dS R + S dR
            gS_in += gdSR * dR
            gR += gdSR * dS
            gdS_in += gdSR * R
            gdR = gdSR * S

        gact = np.concatenate([gZ, gG, gR], axis=1)
        if tangent:
            gdact = np.concatenate([gdZ, gdG, gdR], axis=1)
            gact += gdact * (-2.0 * act * dpre)
            gdpre = gdact * (1.0 - act * act)
        gpre = gact * (1.0 - act * act)

        gU3 = g["U"][layer, :3].reshape(3 * w, -1)
        gW3 = g["W"][layer, :3].reshape(3 * w, w)
        gU3 += gpre.T @ X
        gW3 += gpre.T @ S
        g["B"][layer, :3] += gpre.sum(axis=0).reshape(3, w)
        gS_in += gpre @ W3
        if tangent:
            gU3[:, 0] += gdpre.sum(axis=0)
            gW3 += gdpre.T @ dS
            gdS_in += gdpre @ W3
        gS = gS_in
        if tangent:
            gdS = gdS_in

    S1 = cache["S1"]
    if tangent:
        # dS1 = (1 - S1^2) W1[:, 0]
        gS = gS + gdS * (-2.0 * S1 * v["W1"][:, 0])
        g["W1"][:, 0] += (gdS * (1.0 - S1 * S1)).sum(axis=0)
    gA1 = gS * (1.0 - S1 * S1)
    g["W1"] += gA1.T @ X
    g["b1"] += gA1.sum(axis=0)


def _inputs(params: NetworkParams, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.arch.input_dim:
        raise ValueError(f"expected {params.arch.input_dim} input columns, got {X.shape[1]}")
    return X


def forward(params: NetworkParams, X) -> np.ndarray:
    """Network output for each row of X."""
    y, _, _ = _forward(params.v, _inputs(params, X), tangent=False, keep=False)
    return y


def time_derivative(params: NetworkParams, X):
    """(u, du/ds) for each row of X, s being the first input coordinate."""
    y, dy, _ = _forward(params.v, _inputs(params, X), tangent=True, keep=False)
    return y, dy


def forward_with_cache(params: NetworkParams, X, tangent=False):
    return _forward(params.v, _inputs(params, X), tangent=tangent, keep=True)


def backward(params: NetworkParams, cache, gy, gdy=None, out=None) -> np.ndarray:
    """Vector-Jacobian product of (u, du/ds) at the cached rows."""
    if out is None:
        out = np.zeros(params.arch.n_params)
    _backward(params.v, cache, np.asarray(gy, dtype=float), None if gdy is None else np.asarray(gdy, dtype=float), out, params.arch)
    return out


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, little-endian float64 vector

MAGIC = b"CPMMDGM1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(fname, params: NetworkParams, **meta):
    header = {
        "format": 1,
        "input_dim": params.arch.input_dim,
        "width": params.arch.width,
        "n_layers": params.arch.n_layers,
        "n_params": params.arch.n_params,
        "dtype": "<f8",
        **meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(fname, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(fname, expect: Architecture = None):
    """Returns (params, header)."""
    with open(fname, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{fname}: not a DGM checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{fname}: corrupt header ({exc})") from None
    arch = Architecture(header["input_dim"], header["width"], header["n_layers"])
    if expect is not None and arch != expect:
        raise CheckpointError(f"{fname}: checkpoint architecture {arch} does not match configured {expect}")
    flat = np.frombuffer(data[12 + hlen :], dtype="<f8")
    if flat.size != arch.n_params:
        raise CheckpointError(f"{fname}: expected {arch.n_params} parameters, found {flat.size}")
    return NetworkParams(arch, flat.astype(np.float64)), header
