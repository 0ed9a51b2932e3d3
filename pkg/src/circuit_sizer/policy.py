"""Multimodal actor-critic: a graph network over the circuit and an FCNN over specs.

The graph branch (GCN or GAT) embeds the circuit graph and mean-pools node
rows into one vector. The spec branch embeds the normalized goal and current
specifications. Both embeddings are concatenated and passed through shared
tanh layers to an M x 3 action head (one softmax row per tunable parameter).
The value network has the same structure with a scalar output layer.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .netlist import FEATURE_DIM, normalized_adjacency
from .tensor import Tensor

CHECKPOINT_VERSION = 1
VARIANTS = ("gcn_fc", "gat_fc", "mlp_baseline")
_MASK = -1e9


@dataclass(frozen=True)
class Architecture:
    variant: str
    num_params: int
    num_specs: int
    feature_dim: int = FEATURE_DIM
    gnn_layers: int = 2
    gnn_hidden: int = 32
    gat_heads: int = 4
    gat_head_dim: int = 8
    gat_slope: float = 0.2
    fcnn_hidden: tuple[int, ...] = (32, 32)
    shared_hidden: tuple[int, ...] = (64, 64)
    mlp_hidden: tuple[int, ...] = ()
    spec_input: str = "goal+intermediate"
    share_trunk: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown policy variant {self.variant!r}; expected one of {VARIANTS}")
        if self.spec_input not in ("goal+intermediate", "goal"):
            raise ValueError(f"unknown spec_input {self.spec_input!r}")

    @property
    def spec_dim(self) -> int:
        return self.num_specs * (2 if self.spec_input == "goal+intermediate" else 1)

    @property
    def graph_dim(self) -> int:
        if self.variant == "gcn_fc":
            return self.gnn_hidden
        if self.variant == "gat_fc":
            return self.gat_heads * self.gat_head_dim
        return 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        d = dict(d)
        for key in ("fcnn_hidden", "shared_hidden", "mlp_hidden"):
            d[key] = tuple(d.get(key, ()))
        return cls(**d)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _dense_layers(rng, prefix: str, sizes: list[int], out: dict):
    for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}.{k}.W"] = _glorot(rng, fi, fo)
        out[f"{prefix}.{k}.b"] = np.zeros((1, fo))


def _trunk_arrays(arch: Architecture, rng, prefix: str) -> dict[str, np.ndarray]:
    w: dict[str, np.ndarray] = {}
    dim = arch.feature_dim
    if arch.variant == "gcn_fc":
        for layer in range(arch.gnn_layers):
            w[f"{prefix}.gnn.{layer}.W"] = _glorot(rng, dim, arch.gnn_hidden)
            dim = arch.gnn_hidden
    elif arch.variant == "gat_fc":
        for layer in range(arch.gnn_layers):
            for h in range(arch.gat_heads):
                w[f"{prefix}.gnn.{layer}.h{h}.W"] = _glorot(rng, dim, arch.gat_head_dim)
                w[f"{prefix}.gnn.{layer}.h{h}.a_src"] = _glorot(rng, arch.gat_head_dim, 1)
                w[f"{prefix}.gnn.{layer}.h{h}.a_dst"] = _glorot(rng, arch.gat_head_dim, 1)
            dim = arch.gat_heads * arch.gat_head_dim
    spec_sizes = [arch.spec_dim] + list(arch.mlp_hidden if arch.variant == "mlp_baseline" else arch.fcnn_hidden)
    _dense_layers(rng, f"{prefix}.fcnn", spec_sizes, w)
    shared_in = arch.graph_dim + spec_sizes[-1]
    _dense_layers(rng, f"{prefix}.fc", [shared_in] + list(arch.shared_hidden), w)
    return w


def init_params(arch: Architecture, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh weights for the policy (``pi.*``) and value (``v.*``) networks."""
    arrays = _trunk_arrays(arch, rng, "pi")
    spec_out = (arch.mlp_hidden if arch.variant == "mlp_baseline" else arch.fcnn_hidden) or (arch.spec_dim,)
    top = arch.shared_hidden[-1] if arch.shared_hidden else arch.graph_dim + spec_out[-1]
    # Small action-head weights keep the initial policy close to uniform.
    arrays["pi.fc.out.W"] = _glorot(rng, top, 3 * arch.num_params, gain=0.01)
    arrays["pi.fc.out.b"] = np.zeros((1, 3 * arch.num_params))
    if not arch.share_trunk:
        arrays.update(_trunk_arrays(arch, rng, "v"))
    arrays["v.fc.out.W"] = _glorot(rng, top, 1)
    arrays["v.fc.out.b"] = np.zeros((1, 1))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def count_params(arch: Architecture) -> int:
    return sum(t.data.size for t in init_params(arch, np.random.default_rng(0)).values())


def budget_matched(arch: Architecture, reference: Architecture) -> Architecture:
    """Widen the MLP baseline's spec encoder until its size matches ``reference``."""
    if arch.variant != "mlp_baseline":
        return arch
    target = count_params(reference)
    depth = max(len(arch.fcnn_hidden), 1)
    best = None
    for width in range(4, 1025, 2):
        cand = Architecture(**{**arch.to_dict(), "mlp_hidden": (width,) * depth})
        n = count_params(cand)
        if best is None or abs(n - target) < abs(best[0] - target):
            best = (n, cand)
        if n > target:
            break
    return best[1]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def gcn_layer(h, a_star, w) -> Tensor:
    """tanh(A* H W)."""
    return T.tanh(T.matmul(T.matmul(a_star, h), w))


def attention_mask(adjacency) -> np.ndarray:
    """Additive mask: 0 on edges and the diagonal, a large negative value elsewhere."""
    adj = np.asarray(adjacency)
    allowed = (adj != 0) | np.eye(len(adj), dtype=bool)
    return np.where(allowed, 0.0, _MASK)


def gat_attention(h, w, a_src, a_dst, mask, slope: float = 0.2) -> tuple[Tensor, Tensor]:
    """Attention coefficients of one head and the projected features ``H W``."""
    wh = T.matmul(h, w)
    src = T.matmul(wh, a_src)
    dst = T.matmul(wh, a_dst)
    scores = T.leaky_relu(T.add(src, T.transpose(dst)), slope)
    alpha = T.softmax_rows(T.add(scores, mask))
    return alpha, wh


def gat_layer(h, adjacency, heads, slope: float = 0.2, mask: np.ndarray | None = None) -> Tensor:
    """Concatenation over heads of tanh(sum_j alpha_ij W h_j), attention restricted to neighbours and self.

    ``heads`` is a sequence of ``(W, a_src, a_dst)``; the score of edge i->j is
    LeakyReLU(a_src . W h_i + a_dst . W h_j).
    """
    if mask is None:
        mask = attention_mask(adjacency)
    outs = []
    for w, a_src, a_dst in heads:
        alpha, wh = gat_attention(h, w, a_src, a_dst, mask, slope)
        outs.append(T.tanh(T.matmul(alpha, wh)))
    return T.concat_many(outs)


def _dense(x, params, prefix: str, n_layers: int) -> Tensor:
    for k in range(n_layers):
        x = T.tanh(T.add(T.matmul(x, params[f"{prefix}.{k}.W"]), params[f"{prefix}.{k}.b"]))
    return x


# ---------------------------------------------------------------------------
# actor-critic
# ---------------------------------------------------------------------------

@dataclass
class PolicyOutput:
    """Batched action distributions (B x M x 3) and state values (B,)."""
    log_probs: np.ndarray
    value: np.ndarray

    @property
    def action_probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def row_log_probs(self, b: int = 0) -> np.ndarray:
        return self.log_probs[b]


class ActorCritic:
    def __init__(self, arch: Architecture, adjacency, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.arch = arch
        self.adjacency = np.asarray(adjacency)
        self.a_star = Tensor(normalized_adjacency(self.adjacency))
        self.mask = Tensor(attention_mask(self.adjacency))
        if params is None:
            params = init_params(arch, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def partition(self) -> dict[str, list[str]]:
        """Names grouped as GNN, FCNN and FC (shared + output layers) weights."""
        groups: dict[str, list[str]] = {"gnn": [], "fcnn": [], "fc": []}
        for name in sorted(self.params):
            groups[name.split(".")[1]].append(name)
        return groups

    def _trunk(self, prefix: str, x: Tensor, spec: Tensor) -> Tensor:
        arch, p = self.arch, self.params
        if arch.variant == "mlp_baseline":
            z = _dense(spec, p, f"{prefix}.fcnn", len(arch.mlp_hidden))
        else:
            h = x
            for layer in range(arch.gnn_layers):
                if arch.variant == "gcn_fc":
                    h = gcn_layer(h, self.a_star, p[f"{prefix}.gnn.{layer}.W"])
                else:
                    heads = [(p[f"{prefix}.gnn.{layer}.h{k}.W"], p[f"{prefix}.gnn.{layer}.h{k}.a_src"],
                              p[f"{prefix}.gnn.{layer}.h{k}.a_dst"]) for k in range(arch.gat_heads)]
                    h = gat_layer(h, None, heads, arch.gat_slope, mask=self.mask)
            graph_emb = T.mean_rows(h)
            z = T.concat_cols(graph_emb, _dense(spec, p, f"{prefix}.fcnn", len(arch.fcnn_hidden)))
        return _dense(z, p, f"{prefix}.fc", len(arch.shared_hidden))

    def graph_embedding(self, x) -> np.ndarray:
        """Pooled output of the policy's graph branch, for inspection and tests."""
        h = Tensor(np.asarray(x, dtype=float))
        p = self.params
        for layer in range(self.arch.gnn_layers):
            if self.arch.variant == "gcn_fc":
                h = gcn_layer(h, self.a_star, p[f"pi.gnn.{layer}.W"])
            else:
                heads = [(p[f"pi.gnn.{layer}.h{k}.W"], p[f"pi.gnn.{layer}.h{k}.a_src"],
                          p[f"pi.gnn.{layer}.h{k}.a_dst"]) for k in range(self.arch.gat_heads)]
                h = gat_layer(h, None, heads, self.arch.gat_slope, mask=self.mask)
        return T.mean_rows(h).data

    def _spec_view(self, spec: np.ndarray) -> np.ndarray:
        if self.arch.spec_input == "goal":
            return spec[..., : self.arch.num_specs]
        return spec

    def forward(self, x, spec) -> tuple[Tensor, Tensor]:
        """Log action probabilities (B x M x 3) and values (B x 1 x 1).

        ``x`` is B x n x F node features, ``spec`` is B x 2N (goal then current specs).
        """
        x = np.asarray(x, dtype=float)
        spec = self._spec_view(np.asarray(spec, dtype=float))
        if x.ndim == 2:
            x = x[None]
        if spec.ndim == 1:
            spec = spec[None]
        batch = x.shape[0]
        if spec.shape != (batch, self.arch.spec_dim) or x.shape[-1] != self.arch.feature_dim:
            raise ValueError(f"input shapes {x.shape}, {spec.shape} do not match the architecture")
        xt = Tensor(x)
        st = Tensor(spec[:, None, :])
        p = self.params
        z_pi = self._trunk("pi", xt, st)
        logits = T.add(T.matmul(z_pi, p["pi.fc.out.W"]), p["pi.fc.out.b"])
        logp = T.log_softmax_rows(T.reshape(logits, (batch, self.arch.num_params, 3)))
        z_v = z_pi if self.arch.share_trunk else self._trunk("v", xt, st)
        value = T.add(T.matmul(z_v, p["v.fc.out.W"]), p["v.fc.out.b"])
        return logp, value

    def __call__(self, x, spec) -> PolicyOutput:
        logp, value = self.forward(x, spec)
        return PolicyOutput(logp.data, value.data.reshape(-1))

    def copy(self) -> ActorCritic:
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return ActorCritic(self.arch, self.adjacency, params)

    # -- checkpoints ---------------------------------------------------------

    def save(self, path: str | Path, config_hash: str = "", meta: dict | None = None):
        doc = {
            "format_version": CHECKPOINT_VERSION,
            "architecture": self.arch.to_dict(),
            "config_hash": config_hash,
            "adjacency": self.adjacency.tolist(),
            "meta": meta or {},
            "weights": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                        for k, v in sorted(self.params.items())},
        }
        Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> tuple[ActorCritic, dict]:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
        arch = Architecture.from_dict(doc["architecture"])
        params = {k: Tensor(np.array(w["data"], dtype=float).reshape(w["shape"]), requires_grad=True, name=k)
                  for k, w in doc["weights"].items()}
        expected = init_params(arch, np.random.default_rng(0))
        if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
            raise ValueError("checkpoint weights do not match its architecture descriptor")
        return cls(arch, np.array(doc["adjacency"]), params), doc


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# action selection
# ---------------------------------------------------------------------------

def sample_action(log_probs: np.ndarray, rng: np.random.Generator | None = None,
                  greedy: bool = False) -> tuple[np.ndarray, float]:
    """Draw one choice per row of an M x 3 distribution; returns the choices and their joint log-prob."""
    log_probs = np.asarray(log_probs)
    if greedy:
        choice = log_probs.argmax(axis=-1)
    else:
        cdf = np.cumsum(np.exp(log_probs), axis=-1)
        u = rng.random(log_probs.shape[:-1])[..., None]
        choice = np.minimum((u > cdf[..., :-1]).sum(axis=-1), 2)
    joint = np.take_along_axis(log_probs, choice[..., None], axis=-1)[..., 0].sum(axis=-1)
    return choice, joint
