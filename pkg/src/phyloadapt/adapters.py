"""Bottleneck adapters, adapter chains and exact parameter accounting.

One adapter block per encoder layer computes ``h + up(act(down(h) + b_down))``.
The down projection carries a bias and the up projection does not, so a block
holds ``2*h*d + d`` parameters and a 12-layer adapter at ``h=768, d=48`` holds
885,312.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint
from ._rng import derive_rng
from .tensor import Tensor, add, gelu, matmul

ACTIVATIONS = ("gelu", "gelu_exact", "identity")


class ChainError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "chain error"


@dataclass(frozen=True)
class AdapterSpec:
    hidden_dim: int
    bottleneck_dim: int = 48
    num_layers: int = 12
    node_id: str = ""
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.hidden_dim < 1 or self.bottleneck_dim < 1 or self.num_layers < 1:
            raise ValueError(f"adapter dimensions must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown adapter activation {self.activation!r}")


def layer_param_count(hidden_dim: int, bottleneck_dim: int) -> int:
    return 2 * hidden_dim * bottleneck_dim + bottleneck_dim


def constrained_bottleneck(d: int, k: int) -> int:
    """Bottleneck width after sharing a budget of ``d`` across ``k`` stacked adapters."""
    if k < 1:
        raise ValueError("reduction factor must be >= 1")
    if d % k:
        raise ValueError(f"bottleneck {d} is not divisible by {k}; choose a bottleneck that is a multiple of {k}")
    return d // k


class AdapterParams:
    def __init__(self, spec: AdapterSpec, layers: list[dict[str, Tensor]]):
        if len(layers) != spec.num_layers:
            raise ValueError(f"expected {spec.num_layers} layer blocks, got {len(layers)}")
        self.spec = spec
        self.layers = layers

    @property
    def node_id(self) -> str:
        return self.spec.node_id

    def parameters(self) -> list[Tensor]:
        return [blk[k] for blk in self.layers for k in ("down_w", "down_b", "up_w")]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def forward(self, hidden: Tensor, layer: int) -> Tensor:
        return adapter_forward(hidden, self.layers[layer], self.spec.activation)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{i}.{k}": blk[k].data for i, blk in enumerate(self.layers) for k in ("down_w", "down_b", "up_w")}

    def checksum(self) -> str:
        return checkpoint.tensor_checksum(self.state())

    def copy(self, node_id: str | None = None) -> "AdapterParams":
        spec = self.spec if node_id is None else replace(self.spec, node_id=node_id)
        layers = [{k: Tensor(v.data.copy()) for k, v in blk.items()} for blk in self.layers]
        return AdapterParams(spec, layers)

    def __repr__(self) -> str:
        s = self.spec
        return f"AdapterParams({s.node_id!r}, h={s.hidden_dim}, d={s.bottleneck_dim}, layers={s.num_layers})"


def new_adapter(spec: AdapterSpec, seed: int, init_std: float = 0.02) -> AdapterParams:
    """Fresh adapter: small Gaussian down projection, zero bias, zero up projection."""
    rng = derive_rng(seed, "adapter", spec.node_id)
    h, d = spec.hidden_dim, spec.bottleneck_dim
    layers = []
    for _ in range(spec.num_layers):
        layers.append(
            {
                "down_w": Tensor(rng.normal(0.0, init_std, size=(h, d))),
                "down_b": Tensor(np.zeros(d)),
                "up_w": Tensor(np.zeros((d, h))),
            }
        )
    return AdapterParams(spec, layers)


def adapter_forward(hidden: Tensor, params: Mapping[str, Tensor], activation: str = "gelu") -> Tensor:
    h = params["down_w"].shape[0]
    if hidden.shape[-1] != h:
        raise ValueError(f"adapter expects hidden size {h}, got {hidden.shape[-1]}")
    z = add(matmul(hidden, params["down_w"]), params["down_b"])
    if activation == "gelu":
        z = gelu(z)
    elif activation == "gelu_exact":
        z = gelu(z, approximate="none")
    return add(hidden, matmul(z, params["up_w"]))


class AdapterChain:
    """Ordered root-first stack of adapters applied after every encoder layer."""

    def __init__(self, members: Sequence[AdapterParams]):
        self.members = list(members)
        layers = {m.spec.num_layers for m in self.members}
        if len(layers) > 1:
            raise ChainError(f"chain mixes adapters with different layer counts: {sorted(layers)}")

    @property
    def node_ids(self) -> list[str]:
        return [m.node_id for m in self.members]

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def forward(self, hidden: Tensor, layer: int) -> Tensor:
        return chain_forward(hidden, self, layer)

    def parameters(self) -> list[Tensor]:
        return [p for m in self.members for p in m.parameters()]

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.members)

    def __repr__(self) -> str:
        return f"AdapterChain({self.node_ids})"


def chain_forward(hidden: Tensor, chain: AdapterChain | None, layer: int) -> Tensor:
    if chain is None:
        return hidden
    for member in chain.members:
        hidden = member.forward(hidden, layer)
    return hidden


def param_count(obj) -> int:
    """Exact parameter count of a spec, adapter, chain, or iterable of any of these."""
    if isinstance(obj, AdapterSpec):
        return obj.num_layers * layer_param_count(obj.hidden_dim, obj.bottleneck_dim)
    if isinstance(obj, AdapterParams):
        return param_count(obj.spec)
    if isinstance(obj, AdapterChain):
        return sum(param_count(m.spec) for m in obj.members)
    if isinstance(obj, Iterable):
        return sum(param_count(x) for x in obj)
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


@dataclass
class AdapterBank:
    """All trainable adapters keyed by tree node, plus the frozen backbone they sit in."""

    backbone: object
    adapters: dict[str, AdapterParams] = field(default_factory=dict)
    update_counts: Counter = field(default_factory=Counter)
    history: dict = field(default_factory=dict)

    def __contains__(self, node: str) -> bool:
        return node in self.adapters

    def __getitem__(self, node: str) -> AdapterParams:
        return self.adapters[node]

    def add(self, spec: AdapterSpec, seed: int) -> AdapterParams:
        if spec.node_id in self.adapters:
            raise ValueError(f"adapter {spec.node_id!r} already exists")
        self.adapters[spec.node_id] = new_adapter(spec, seed)
        return self.adapters[spec.node_id]

    def chain(self, node_ids: Sequence[str]) -> AdapterChain:
        missing = [n for n in node_ids if n not in self.adapters]
        if missing:
            raise ChainError(f"no adapter in the bank for node(s): {', '.join(missing)}")
        return AdapterChain([self.adapters[n] for n in node_ids])

    def checksums(self) -> dict[str, str]:
        return {n: a.checksum() for n, a in self.adapters.items()}

    def param_count(self) -> int:
        return sum(a.param_count() for a in self.adapters.values())

    def set_trainable(self, flag: bool) -> None:
        for a in self.adapters.values():
            a.set_trainable(flag)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n, a in self.adapters.items():
            out.update(a.state(prefix=f"{n}/"))
        return out


def save_bank(bank: AdapterBank, path: str | Path) -> str:
    meta = {
        "adapters": {n: asdict(a.spec) for n, a in bank.adapters.items()},
        "update_counts": dict(bank.update_counts),
    }
    return checkpoint.save(path, "adapter-bank", meta, bank.state())


def load_bank(path: str | Path, backbone=None) -> AdapterBank:
    kind, meta, tensors, _ = checkpoint.load(path)
    if kind != "adapter-bank":
        raise checkpoint.CheckpointError(f"{path}: expected an adapter-bank checkpoint, found {kind!r}")
    bank = AdapterBank(backbone)
    for node, spec_doc in meta["adapters"].items():
        spec = AdapterSpec(**spec_doc)
        layers = [
            {k: Tensor(tensors[f"{node}/{i}.{k}"]) for k in ("down_w", "down_b", "up_w")} for i in range(spec.num_layers)
        ]
        bank.adapters[node] = AdapterParams(spec, layers)
    bank.update_counts.update(meta.get("update_counts", {}))
    return bank
