"""Neural building blocks: parameter sets, GRU layers, layer norm, linear maps.

Every function here is written against :mod:`aedadapt.autodiff` so that it is
differentiable when called under a tape.  Sequence functions take batched
inputs shaped ``(B, T, width)`` together with an optional ``(B, T)`` 0/1 mask
for right-padded sequences.

GRU convention (one bias per gate)::

    z  = sigmoid(x W_z + h U_z + b_z)
    r  = sigmoid(x W_r + h U_r + b_r)
    h~ = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * h~
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

GRU_KEYS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")
INIT_SCALE = 0.08


class ParamSet(dict):
    """Ordered mapping of dotted parameter names to leaf tensors."""

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix.`` keyed by the remainder of their names."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def select(self, *prefixes: str) -> "ParamSet":
        """Shared-reference subset whose names start with any prefix."""
        return ParamSet((k, v) for k, v in self.items() if k.startswith(prefixes))

    def copy(self) -> "ParamSet":
        """Deep copy: fresh tensors with copied values and no gradients."""
        out = ParamSet()
        for k, v in self.items():
            out[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def zero_grad(self) -> None:
        ad.zero_grad(self.values())

    def set_requires_grad(self, flag: bool) -> "ParamSet":
        for v in self.values():
            v.requires_grad = flag
        return self

    def num_values(self) -> int:
        return sum(v.size for v in self.values())


def _param(rng: np.random.Generator, shape, name: str, scale: float = INIT_SCALE) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_gru(rng, d_in: int, d: int, prefix: str, scale: float = INIT_SCALE) -> ParamSet:
    p = ParamSet()
    for gate in "zrh":
        p[f"{prefix}.W_{gate}"] = _param(rng, (d_in, d), f"{prefix}.W_{gate}", scale)
    for gate in "zrh":
        p[f"{prefix}.U_{gate}"] = _param(rng, (d, d), f"{prefix}.U_{gate}", scale)
    for gate in "zrh":
        p[f"{prefix}.b_{gate}"] = _zeros((d,), f"{prefix}.b_{gate}")
    return p


def init_layer_norm(d: int, prefix: str) -> ParamSet:
    return ParamSet({
        f"{prefix}.gain": Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.gain"),
        f"{prefix}.bias": _zeros((d,), f"{prefix}.bias"),
    })


def init_linear(rng, d_in: int, d_out: int, prefix: str, scale: float = INIT_SCALE) -> ParamSet:
    return ParamSet({
        f"{prefix}.W": _param(rng, (d_in, d_out), f"{prefix}.W", scale),
        f"{prefix}.b": _zeros((d_out,), f"{prefix}.b"),
    })


def init_embedding(rng, vocab: int, d: int, name: str, scale: float = INIT_SCALE) -> ParamSet:
    return ParamSet({name: _param(rng, (vocab, d), name, scale)})


def init_discriminator(rng, d: int, hidden: int, n_hidden: int = 2, scale: float = INIT_SCALE) -> ParamSet:
    p = ParamSet()
    width = d
    for i in range(n_hidden):
        p.update(init_linear(rng, width, hidden, f"l{i}", scale))
        width = hidden
    p.update(init_linear(rng, width, 1, "out", scale))
    return p


# ----------------------------------------------------------------------------
# GRU
# ----------------------------------------------------------------------------


def _check_gru(params: Mapping[str, Tensor], d_in: int) -> int:
    missing = [k for k in GRU_KEYS if k not in params]
    if missing:
        raise ContractError(f"GRU parameters missing {missing}")
    d = params["U_z"].shape[0]
    for k in GRU_KEYS:
        want = (d_in, d) if k[0] == "W" else (d, d) if k[0] == "U" else (d,)
        if params[k].shape != want:
            raise ShapeError(f"GRU parameter {k} has shape {params[k].shape}, expected {want}")
    return d


class FusedGru:
    """Input-side gate weights concatenated once per forward pass.

    The whole input sequence is then projected with a single matmul.
    """

    def __init__(self, params: Mapping[str, Tensor]):
        d_in = params["W_z"].shape[0]
        self.d = _check_gru(params, d_in)
        self.d_in = d_in
        self.W = ad.concat([params["W_z"], params["W_r"], params["W_h"]], axis=1)
        self.b = ad.concat([params["b_z"], params["b_r"], params["b_h"]], axis=0)
        self.U_z, self.U_r, self.U_h = params["U_z"], params["U_r"], params["U_h"]

    def project(self, x: Tensor) -> Tensor:
        """Input-side pre-activations for all three gates, width ``3d``."""
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"GRU input width {x.shape[-1]} != expected {self.d_in}")
        return x @ self.W + self.b

    def step(self, xz: Tensor, xr: Tensor, xh: Tensor, h: Tensor) -> Tensor:
        z = ad.sigmoid(xz + h @ self.U_z)
        r = ad.sigmoid(xr + h @ self.U_r)
        cand = ad.tanh(xh + (r * h) @ self.U_h)
        return h + z * (cand - h)


def gru_cell(x: Tensor, h_prev: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """One GRU update; ``x`` is ``(..., d_in)`` and ``h_prev`` is ``(..., d)``."""
    x, h_prev = ad.as_tensor(x), ad.as_tensor(h_prev)
    cell = FusedGru(params)
    if h_prev.shape[-1] != cell.d:
        raise ShapeError(f"gru_cell: state width {h_prev.shape[-1]} != hidden width {cell.d}")
    xw = cell.project(x)
    d = cell.d
    return cell.step(xw[..., :d], xw[..., d:2 * d], xw[..., 2 * d:], h_prev)


def gru_sequence(X: Tensor, params: Mapping[str, Tensor], mask: np.ndarray | None = None,
                 reverse: bool = False) -> Tensor:
    """Run a GRU over ``X`` of shape ``(B, T, d_in)`` from a zero state.

    With ``reverse=True`` the recurrence runs from the last frame to the
    first; outputs are still indexed by input position.  Padded positions
    (mask 0) carry the state through unchanged.
    """
    X = ad.as_tensor(X)
    if X.ndim != 3:
        raise ShapeError(f"gru_sequence expects (B, T, d_in), got {X.shape}")
    B, T, _ = X.shape
    if T == 0:
        raise ContractError("gru_sequence: empty input sequence")
    cell = FusedGru(params)
    d = cell.d
    xw = cell.project(X)
    xz, xr, xh = xw[:, :, :d], xw[:, :, d:2 * d], xw[:, :, 2 * d:]
    if mask is not None:
        # a saturated update gate (z == 0 exactly) carries the state over padding
        xz = xz + np.where(mask > 0, 0.0, -1e30)[:, :, None]
    h = Tensor(np.zeros((B, d)))
    outs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h = cell.step(xz[:, t], xr[:, t], xh[:, t], h)
        outs[t] = h
    return ad.stack(outs, axis=1)


def layer_norm(x: Tensor, params: Mapping[str, Tensor], eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale/shift."""
    x = ad.as_tensor(x)
    d = x.shape[-1]
    if d < 2:
        raise ContractError(f"layer_norm needs width >= 2, got {d}")
    gain, bias = params["gain"], params["bias"]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} for width {d}")
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ad.power(var + eps, -0.5) * gain + bias


def bigru_layer(X: Tensor, fwd: Mapping[str, Tensor], bwd: Mapping[str, Tensor],
                mask: np.ndarray | None = None) -> Tensor:
    return ad.concat([gru_sequence(X, fwd, mask), gru_sequence(X, bwd, mask, reverse=True)], axis=-1)


def bigru_encoder_stack(X: Tensor, params: Mapping[str, Tensor], n_layers: int,
                        mask: np.ndarray | None = None, eps: float = 1e-5) -> Tensor:
    """Stacked bidirectional GRU with layer norm on every layer's output.

    ``params`` holds ``l{i}.fwd.*``, ``l{i}.bwd.*`` and ``l{i}.ln.*`` entries.
    Returns ``(B, T, 2 * hidden)``.
    """
    if n_layers < 1:
        raise ContractError("encoder needs at least one layer")
    X = ad.as_tensor(X)
    if X.ndim == 2:
        X = X.reshape(1, *X.shape)
    if X.shape[1] == 0:
        raise ContractError("encoder: empty input sequence")
    h = X
    for i in range(n_layers):
        sub = ParamSet(params)
        raw = bigru_layer(h, sub.scope(f"l{i}.fwd"), sub.scope(f"l{i}.bwd"), mask)
        h = layer_norm(raw, sub.scope(f"l{i}.ln"), eps)
    return h


def linear(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    W, b = params["W"], params["b"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    return x @ W + b


def feedforward_discriminator_body(f: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """tanh hidden layers followed by a single pre-sigmoid logit per row."""
    f = ad.as_tensor(f)
    ps = ParamSet(params)
    n_hidden = sum(1 for k in ps if k.endswith(".W")) - 1
    h = f
    for i in range(n_hidden):
        h = ad.tanh(linear(h, ps.scope(f"l{i}")))
    logit = linear(h, ps.scope("out"))
    return logit.reshape(logit.shape[:-1])


def iter_tensors(params: Mapping[str, Tensor] | Iterable[Tensor]) -> list[Tensor]:
    return list(params.values()) if isinstance(params, Mapping) else list(params)
