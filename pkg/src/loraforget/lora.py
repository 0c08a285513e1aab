"""Low-rank adapters on frozen layers: injection, merge/removal, budgets.

A conv kernel [C_out, C_in, kh, kw] is treated as the matrix
[C_out, C_in*kh*kw], so an adapter on it is ``scale * B @ A`` with
B: [C_out, r] and A: [r, C_in*kh*kw]. The factored forward runs the input
through A (as an r-channel conv) and then B (as a 1x1 conv).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import container
from . import ndgrad as nd
from .nets import Net
from .ndgrad import Tensor

VALID_TAGS = {"encoder", "decoder", "head", "trunk"}


class AdapterError(ValueError):
    """Invalid adapter construction or state transition."""


@dataclass(eq=False)
class LoraAdapter:
    target: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    dropout_p: float
    weight_shape: tuple
    tag: str = ""
    scale: float = field(init=False)

    def __post_init__(self):
        self.scale = self.alpha / self.rank

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def n_params(self) -> int:
        return self.rank * (self.d + self.k)

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def delta_matrix(self) -> np.ndarray:
        """Dense ``scale * B @ A`` in the [d, k] matrix view."""
        return self.scale * (self.B.data @ self.A.data)

    def delta_weight(self) -> np.ndarray:
        """``scale * B @ A`` reshaped to the frozen weight's shape."""
        return self.delta_matrix().reshape(self.weight_shape).astype(self.A.dtype)

    def delta(self, x: Tensor, padding: int = 0, training: bool = False, rng=None) -> Tensor:
        """Factored adapter branch ``scale * B(A(dropout(x)))``."""
        if training and self.dropout_p > 0:
            x = nd.dropout(x, self.dropout_p, rng)
        if len(self.weight_shape) == 4:
            _, c_in, kh, kw = self.weight_shape
            if x.ndim != 4 or x.shape[1] != c_in:
                raise AdapterError(f"{self.target}: input {x.shape} incompatible with kernel {self.weight_shape}")
            low = nd.conv2d(x, self.A.reshape(self.rank, c_in, kh, kw), padding=padding)
            out = nd.conv2d(low, self.B.reshape(self.d, self.rank, 1, 1))
        else:
            if x.shape[-1] != self.k:
                raise AdapterError(f"{self.target}: input {x.shape} incompatible with weight {self.weight_shape}")
            out = (x @ self.A.T) @ self.B.T
        return nd.scalar_mul(out, self.scale)


@dataclass(eq=False)
class AdapterSet:
    adapters: dict
    policy: tuple
    rank: int
    alpha: float
    dropout_p: float

    def __iter__(self):
        return iter(self.adapters.values())

    def __len__(self) -> int:
        return len(self.adapters)

    def __getitem__(self, target: str) -> LoraAdapter:
        return self.adapters[target]

    def __contains__(self, target: str) -> bool:
        return target in self.adapters

    def targets(self) -> list[str]:
        return list(self.adapters)

    def parameters(self, tags: Iterable[str] | None = None) -> list[Tensor]:
        tags = None if tags is None else set(tags)
        return [p for a in self.adapters.values() if tags is None or a.tag in tags for p in a.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{a.target}.{n}", p) for a in self.adapters.values() for n, p in (("A", a.A), ("B", a.B))]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def layer_rank(d: int, k: int, r: int, strict: bool) -> int:
    limit = min(d, k) // 2
    if r <= limit:
        return r
    if strict:
        raise AdapterError(f"rank {r} too large for a {d}x{k} weight (limit {limit})")
    return max(1, limit)


def inject(net: Net, policy: Iterable[str] = ("decoder", "head"), r: int = 8, alpha: float = 32.0,
           dropout_p: float = 0.05, seed: int = 0, strict: bool = False) -> AdapterSet:
    """Attach adapters to every layer whose tag is in ``policy``.

    A ~ N(0, 0.02^2), B = 0, so the adapted net starts identical to the
    frozen one. With ``strict=False`` layers too narrow for rank ``r``
    (e.g. a single-channel head) get ``max(1, min(d, k) // 2)`` instead,
    with alpha rescaled so every adapter shares the scale ``alpha / r``.
    """
    policy = tuple(policy)
    unknown = set(policy) - VALID_TAGS
    if unknown:
        raise AdapterError(f"unknown tags in policy: {sorted(unknown)}")
    if not net.frozen():
        raise AdapterError("inject requires a frozen network (use nets.clone_frozen)")
    if net.merged:
        raise AdapterError("cannot inject into a merged network")
    if net.adapters:
        raise AdapterError("network already carries adapters")
    if r < 1 or alpha <= 0 or not 0 <= dropout_p < 1:
        raise AdapterError(f"invalid adapter hyperparameters r={r}, alpha={alpha}, dropout={dropout_p}")
    rng = np.random.default_rng(seed)
    dtype = net.dtype
    adapters = {}
    for name, spec in net.layers.items():
        if spec.tag not in policy:
            continue
        shape = spec.weight_shape
        d, k = shape[0], int(np.prod(shape[1:]))
        rank = layer_rank(d, k, r, strict)
        # clamped layers keep the nominal scale alpha / r
        layer_alpha = float(alpha) * rank / r
        A = Tensor((rng.standard_normal((rank, k)) * 0.02).astype(dtype), requires_grad=True)
        B = Tensor(np.zeros((d, rank), dtype=dtype), requires_grad=True)
        adapters[name] = LoraAdapter(name, A, B, rank, layer_alpha, float(dropout_p), shape, spec.tag)
    if not adapters:
        raise AdapterError(f"policy {policy} matches no layer")
    aset = AdapterSet(adapters, policy, r, float(alpha), float(dropout_p))
    attach(net, aset)
    return aset


def attach(net: Net, aset: AdapterSet) -> Net:
    for target, a in aset.adapters.items():
        if target not in net.layers:
            raise AdapterError(f"adapter target {target!r} not in network registry")
        if net.layers[target].weight_shape != tuple(a.weight_shape):
            raise AdapterError(f"adapter {target} shape {a.weight_shape} != layer {net.layers[target].weight_shape}")
    net.adapters = dict(aset.adapters)
    return net


def adapted_forward(w_frozen: Tensor, adapter: LoraAdapter, x: Tensor, padding: int = 0,
                    training: bool = False, rng=None) -> Tensor:
    """Frozen layer output plus the adapter branch (no bias)."""
    if w_frozen.shape != tuple(adapter.weight_shape):
        raise AdapterError(f"weight {w_frozen.shape} does not match adapter {adapter.weight_shape}")
    if w_frozen.ndim == 4:
        base = nd.conv2d(x, w_frozen, padding=padding)
        return base + adapter.delta(x, padding=padding, training=training, rng=rng)
    return x @ w_frozen.T + adapter.delta(x, training=training, rng=rng)


def _bare_copy(net: Net) -> Net:
    clone = copy.copy(net)
    clone.registry = {n: (Tensor(t.data.copy()), tag) for n, (t, tag) in net.registry.items()}
    clone.layers = dict(net.layers)
    clone.adapters = {}
    clone.dropout_rng = copy.deepcopy(net.dropout_rng)
    return clone


def merge(net: Net, aset: AdapterSet | None = None) -> Net:
    """Fold every attached adapter into a copy of the frozen weights."""
    if net.merged:
        raise AdapterError("network is already merged (double merge)")
    adapters = net.adapters if aset is None else aset.adapters
    if not adapters:
        raise AdapterError("no adapters to merge")
    out = _bare_copy(net)
    for target, a in adapters.items():
        w = out.weight(target)
        w.data = (w.data + a.delta_weight()).astype(w.dtype)
    out.merged = True
    return out


def remove(net: Net, aset: AdapterSet | None = None) -> Net:
    """Drop the adapters, returning the untouched frozen network."""
    if net.merged:
        raise AdapterError("merged networks carry no adapters to remove")
    if not net.adapters:
        raise AdapterError("network carries no adapters")
    if aset is not None and set(aset.adapters) != set(net.adapters):
        raise AdapterError("adapter set does not match the attached adapters")
    return _bare_copy(net)


def budget_pct(trainable: float, total: float) -> float:
    return 100.0 * trainable / total


def budget(net: Net, aset: AdapterSet | None = None) -> tuple[int, int, float]:
    """(trainable adapter params, total frozen params, percentage)."""
    trainable = 0 if aset is None else sum(a.n_params for a in aset)
    total = net.num_params()
    return trainable, total, budget_pct(trainable, total)


def spectral_norm(m: np.ndarray, iters: int = 50, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value by power iteration on the smaller Gram matrix."""
    m = np.asarray(m, dtype=np.float64)
    gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
    if not np.any(gram):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new = float(v @ gram @ v)
        if abs(new - est) <= tol * max(new, 1e-300):
            est = new
            break
        est = new
    return float(np.sqrt(max(est, 0.0)))


def drift_bound(aset: AdapterSet | Iterable[LoraAdapter]) -> dict[str, tuple[float, float]]:
    """Per adapter: (||scale*BA||_F, scale*sqrt(r)*||A||_2*||B||_2)."""
    adapters = aset if not isinstance(aset, AdapterSet) else aset.adapters.values()
    out = {}
    for a in adapters:
        lhs = float(np.linalg.norm(a.delta_matrix().astype(np.float64)))
        rhs = a.scale * np.sqrt(a.rank) * spectral_norm(a.A.data) * spectral_norm(a.B.data)
        out[a.target] = (lhs, float(rhs))
    return out


# -- checkpoints ------------------------------------------------------------

def save(aset: AdapterSet, path) -> None:
    header = container.Record(
        "#lora:" + ",".join(aset.policy), "header",
        np.array([aset.rank, aset.alpha, aset.dropout_p], dtype=np.float32),
    )
    records = [header]
    for a in aset:
        records.append(container.Record(f"{a.target}.A", "adapter", a.A.data))
        records.append(container.Record(f"{a.target}.B", "adapter", a.B.data))
    container.write(path, records)


def load(path, net: Net) -> AdapterSet:
    """Read an adapter checkpoint and attach it to ``net``."""
    records = container.read(path)
    if not records or records[0].tag != "header" or not records[0].name.startswith("#lora:"):
        raise container.ContainerError(f"{path}: missing adapter header record")
    policy = tuple(t for t in records[0].name[len("#lora:"):].split(",") if t)
    r, alpha, dropout_p = (float(f"{v:.7g}") for v in records[0].array)
    arrays = {rec.name: rec.array for rec in records[1:]}
    adapters = {}
    targets = []
    for name in arrays:
        target = name.rsplit(".", 1)[0]
        if target not in targets:
            targets.append(target)
    dtype = net.dtype
    for target in targets:
        if target not in net.layers:
            raise container.ContainerError(f"{path}: adapter target {target!r} not in network")
        try:
            A, B = arrays[f"{target}.A"], arrays[f"{target}.B"]
        except KeyError as exc:
            raise container.ContainerError(f"{path}: incomplete adapter {target}") from exc
        spec = net.layers[target]
        adapters[target] = LoraAdapter(
            target, Tensor(A.astype(dtype), requires_grad=True), Tensor(B.astype(dtype), requires_grad=True),
            A.shape[0], alpha * A.shape[0] / r, dropout_p, spec.weight_shape, spec.tag,
        )
    aset = AdapterSet(adapters, policy, int(r), alpha, dropout_p)
    attach(net, aset)
    return aset
