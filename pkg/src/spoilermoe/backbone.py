"""End-to-end model assembly: branch encoders, per-modality MoE, fusion.

The graph branch consumes raw [text, meta] node features through the
graph encoder; the meta branch applies a 2-layer MLP to the review's
padded meta vector; the text branch projects the review's text
embedding with one linear layer + ReLU. Each active modality passes
through its own MoE (or MLP / identity for the ablations), and the
three fusion tokens are combined by the fusion layer. Ablated
modalities contribute a zero token and register no parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import ParamRegistry
from .diffcore import tensor as T
from .errors import ConfigError, DataFormatError
from .fusion import FusionLayer
from .graph import GraphEncoder, Subgraph, init_node_features
from .moe import MoEConfig, MoELayer, balancing_loss
from .nn import MLP2, Linear

MODALITIES = ("meta", "text", "graph")

CHECKPOINT_MAGIC = b"MMOE"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """All architecture dimensions plus loss weights; defaults are paper scale."""

    text_dim: int = 768
    meta_dim: int = 6
    meta_hidden: int = 768
    meta_out: int = 256
    text_proj_dim: int = 256
    gnn_hidden: int = 512
    gnn_out: int = 256
    gnn_layers: int = 2
    n_experts: int = 2
    k: int = 1
    moe_hidden: int = 1024
    moe_out: int = 256
    moe_noisy: bool = True
    fusion_heads: int = 4
    fusion_ff: int = 1024
    fusion_layers: int = 4
    ut_layers: int = 12
    ut_heads: int = 12
    ut_ff: int = 3072
    ut_max_len: int = 16
    ut_dropout: float = 0.1
    dropout: float = 0.2
    leaky_slope: float = 0.2
    lambda_l2: float = 0.0
    w_balance: float = 1e-2
    neighbor_cap: int = 200
    hops: int = 2
    use_graph: bool = True
    use_text: bool = True
    use_meta: bool = True
    use_profile: bool = True
    moe_mode: str = "moe"  # moe | mlp | none
    fusion_mode: str = "transformer"  # transformer | concatenate | mean_pool | max_pool

    @property
    def gnn_input_dim(self):
        return self.text_dim + self.meta_dim

    @property
    def fusion_dim(self):
        return self.moe_out

    @property
    def ut_dim(self):
        return self.text_dim

    def branch_out(self, mod):
        return {"meta": self.meta_out, "text": self.text_proj_dim, "graph": self.gnn_out}[mod]

    def active_modalities(self):
        flags = {"meta": self.use_meta, "text": self.use_text, "graph": self.use_graph}
        return tuple(m for m in MODALITIES if flags[m])

    def __post_init__(self):
        if self.lambda_l2 < 0 or self.w_balance < 0:
            raise ConfigError("lambda_l2 and w_balance must be non-negative")
        if self.moe_mode not in ("moe", "mlp", "none"):
            raise ConfigError(f"unknown moe_mode {self.moe_mode!r}")
        if self.gnn_layers < 1:
            raise ConfigError("gnn_layers must be >= 1")
        if not 1 <= self.k <= self.n_experts:
            raise ConfigError(f"need 1 <= k <= n_experts, got k={self.k}, n={self.n_experts}")
        for f in ("text_dim", "meta_dim", "meta_hidden", "meta_out", "text_proj_dim",
                  "gnn_hidden", "gnn_out", "moe_hidden", "moe_out"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if self.moe_mode == "none":
            # modality outputs feed fusion directly; dims must line up
            for mod in self.active_modalities():
                if self.branch_out(mod) != self.fusion_dim:
                    raise ConfigError(
                        f"moe_mode=none requires {mod} branch dim {self.branch_out(mod)} "
                        f"to equal fusion dim {self.fusion_dim}"
                    )
        if not self.active_modalities():
            raise ConfigError("at least one modality must stay active")

    @classmethod
    def desk(cls, **overrides):
        """Small configuration for CPU-scale runs."""
        base = dict(
            text_dim=64, meta_dim=6, meta_hidden=64, meta_out=64, text_proj_dim=64,
            gnn_hidden=64, gnn_out=64, gnn_layers=2, n_experts=2, k=1, moe_hidden=128,
            moe_out=64, fusion_heads=4, fusion_ff=128, fusion_layers=2, ut_layers=2,
            ut_heads=4, ut_ff=128, ut_max_len=16,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ReviewBatch:
    review_ids: np.ndarray  # local review indices (batch,)
    labels: np.ndarray  # (batch,) int
    text: np.ndarray  # (batch, text_dim)
    meta: np.ndarray  # (batch, meta_dim)
    subgraph: Subgraph | None  # seeds = review_ids, in order
    node_text: np.ndarray | None  # (n_nodes, text_dim)
    node_meta: np.ndarray | None  # (n_nodes, meta_dim)


@dataclass
class ForwardResult:
    logits: T.Tensor  # (batch, 2)
    gates: dict  # modality -> GateOutput (only for moe_mode="moe")
    fusion_attention: list | None
    gat_capture: list | None


class SpoilerModel:
    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.registry = ParamRegistry(seed, dtype=dtype)
        c = config
        self.meta_mlp = (
            MLP2(self.registry, "meta_enc", c.meta_dim, c.meta_hidden, c.meta_out)
            if c.use_meta
            else None
        )
        self.text_proj = (
            Linear(self.registry, "text_proj", c.text_dim, c.text_proj_dim) if c.use_text else None
        )
        self.graph_enc = None
        if c.use_graph:
            dims = [c.gnn_input_dim] + [c.gnn_hidden] * (c.gnn_layers - 1) + [c.gnn_out]
            self.graph_enc = GraphEncoder(
                self.registry, "gnn", c.gnn_input_dim, dims, slope=c.leaky_slope,
                dropout=c.dropout,
            )
        self.moe = {}
        self.moe_mlp = {}
        if c.moe_mode == "moe":
            for mod in c.active_modalities():
                mcfg = MoEConfig(
                    n_experts=c.n_experts, k=c.k, d_in=c.branch_out(mod),
                    d_hidden=c.moe_hidden, d_out=c.moe_out, noisy=c.moe_noisy,
                )
                self.moe[mod] = MoELayer(self.registry, f"moe_{mod}", mcfg)
        elif c.moe_mode == "mlp":
            for mod in c.active_modalities():
                self.moe_mlp[mod] = MLP2(
                    self.registry, f"moemlp_{mod}", c.branch_out(mod), c.moe_hidden, c.moe_out
                )
        self.fusion = FusionLayer(
            self.registry, "fusion", c.fusion_dim, c.fusion_heads, c.fusion_ff,
            c.fusion_layers, dropout=c.dropout, mode=c.fusion_mode,
        )

    def forward(self, batch, training=False, rng=None, capture_attention=False,
                capture_gat=False):
        c = self.config
        b = len(batch.review_ids)
        gates = {}
        z = {}
        gat_capture = [] if capture_gat else None

        if c.use_meta:
            x = self.meta_mlp(T.Tensor(batch.meta))
            z["meta"] = self._route("meta", x, training, rng, gates)
        if c.use_text:
            x = T.relu(self.text_proj(T.Tensor(batch.text)))
            z["text"] = self._route("text", x, training, rng, gates)
        if c.use_graph:
            feats = init_node_features(batch.subgraph, batch.node_text, batch.node_meta)
            nodes = self.graph_enc(
                feats, batch.subgraph, training=training, rng=rng, capture=gat_capture
            )
            x = T.gather_rows(nodes, batch.subgraph.seed_positions)
            z["graph"] = self._route("graph", x, training, rng, gates)

        zero = None
        for mod in MODALITIES:
            if mod not in z:
                if zero is None:
                    zero = T.Tensor(np.zeros((b, c.fusion_dim), dtype=self.registry.dtype))
                z[mod] = zero

        logits, fusion_attn = self.fusion(
            z["meta"], z["text"], z["graph"], training=training, rng=rng,
            capture_attention=capture_attention,
        )
        return ForwardResult(logits, gates, fusion_attn, gat_capture)

    def _route(self, mod, x, training, rng, gates):
        c = self.config
        if c.moe_mode == "moe":
            out, gate = self.moe[mod](x, training=training, rng=rng)
            gates[mod] = gate
            return out
        if c.moe_mode == "mlp":
            return self.moe_mlp[mod](x)
        return x

    __call__ = forward


def total_loss(logits, labels, registry, gate_outputs, lambda_l2=0.0, w_balance=1e-2):
    """Summed softmax cross-entropy + lambda*L2 + w*sum of balancing losses."""
    loss = T.tsum(T.cross_entropy(logits, labels))
    parts = {"ce": loss.item()}
    if lambda_l2 > 0:
        reg = None
        for p in registry:
            s = T.tsum(T.square(p))
            reg = s if reg is None else T.add(reg, s)
        parts["l2"] = reg.item()
        loss = T.add(loss, T.mul(reg, T.Tensor(np.array(lambda_l2, dtype=np.float32))))
    if w_balance > 0 and gate_outputs:
        bl = None
        for gate in gate_outputs.values():
            term = balancing_loss(gate.load)
            bl = term if bl is None else T.add(bl, term)
        parts["balance"] = bl.item()
        loss = T.add(loss, T.mul(bl, T.Tensor(np.array(w_balance, dtype=np.float32))))
    return loss, parts


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, config, registry):
    """Versioned binary container: magic, version, config JSON, parameters."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        params = list(registry)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            pid = p.param_id.encode("utf-8")
            arr = np.ascontiguousarray(p.data)
            fh.write(struct.pack("<H", len(pid)))
            fh.write(pid)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    """Returns (ModelConfig, state dict param_id -> ndarray)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: bad checkpoint magic {magic!r}")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(json.loads(fh.read(blob_len).decode("utf-8")))
        (n_params,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(n_params):
            (id_len,) = struct.unpack("<H", fh.read(2))
            pid = fh.read(id_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _CODE_DTYPES[code]
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype.newbyteorder("<"))
            state[pid] = data.reshape(shape).astype(dtype)
        return config, state


def build_model(config, state=None, seed=0):
    model = SpoilerModel(config, seed=seed)
    if state is not None:
        model.registry.load_state_dict(state)
    return model
