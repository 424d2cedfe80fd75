"""Training loop, robustness perturbations, ablation runner, reports.

The training run has two phases: the user-profile pretext phase (its
own registry and optimizer) followed by the backbone phase. Profiles
extracted after the pretext phase are frozen; the backbone never
updates them. The best checkpoint is chosen by validation F1 and the
reported test metrics always come from that epoch.

Feature perturbations (text / meta modes) zero elements of the review
feature matrices consumed by the text and meta branches; edge
perturbation removes graph edges. Both apply at evaluation time only.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbone import (
    ModelConfig,
    ReviewBatch,
    SpoilerModel,
    save_checkpoint,
    total_loss,
)
from .data import EmbeddingMatrix, build_meta_vectors, save_embeddings
from .diffcore import AdamW, lr_exponential_step
from .diffcore import tensor as T
from .errors import ConfigError, ContractError
from .fusion import average_fusion_attention
from .graph import (
    build_graph,
    drop_edges,
    gat_edge_attention_summary,
    init_node_features,
    sample_subgraph,
)
from .metrics import evaluate_metrics
from .profiles import ProfileEncoder, build_user_sequences, train_pretext

# fixed stream tags so every rng use has its own deterministic lane
_STREAM_INIT, _STREAM_ORDER, _STREAM_SAMPLE, _STREAM_NOISE, _STREAM_EVAL = 0, 1, 2, 3, 4


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-4
    gamma: float = 0.95
    weight_decay: float = 1e-4
    strict_serial: bool = False
    pretext_epochs: int = 20
    pretext_lr: float = 1e-5
    pretext_gamma: float = 0.9
    pretext_weight_decay: float = 1e-5
    pretext_batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PerturbSpec:
    mode: str  # edges | text | meta
    rates: list[float]
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("edges", "text", "meta"):
            raise ConfigError(f"unknown perturbation mode {self.mode!r}")
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ConfigError(f"perturbation rates must be in [0, 1], got {self.rates}")
        if sorted(self.rates) != list(self.rates):
            raise ConfigError("perturbation rates must be sorted ascending")


@dataclass
class Report:
    config: dict = field(default_factory=dict)
    seed: int = 0
    wall_clock_sec: float = 0.0
    epochs: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)
    fusion_attention: dict | None = None
    gat_attention_by_edge_type: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


class FeatureSource:
    """Per-branch feature access with optional perturbed branch inputs.

    The graph branch always sees the unperturbed node features; text and
    meta perturbations only mask the matrices consumed by those branches.
    """

    def __init__(self, dataset, meta_table, profiles=None, branch_text=None, branch_meta=None):
        self.dataset = dataset
        self.meta_table = meta_table
        self.profiles = profiles
        n_u, n_m, _ = dataset.counts()
        self.n_users, self.n_movies = n_u, n_m
        self.branch_text = branch_text if branch_text is not None else dataset.review_text.data
        self.branch_meta = branch_meta if branch_meta is not None else meta_table.review
        text_dim = dataset.review_text.dim
        user_text = np.zeros((n_u, text_dim), dtype=np.float32)
        if profiles is not None:
            if profiles.dim != text_dim:
                raise ConfigError(
                    f"profile dim {profiles.dim} != text dim {text_dim}"
                )
            user_text = profiles.data
        # node feature lookup in global-id order: [users | movies | reviews]
        self.node_text = np.concatenate(
            [user_text, dataset.movie_text.data, dataset.review_text.data], axis=0
        )
        self.node_meta = np.concatenate(
            [meta_table.user, meta_table.movie, meta_table.review], axis=0
        )

    def batch(self, graph, review_ids, labels, rng, hops, cap):
        review_ids = np.asarray(review_ids, dtype=np.int64)
        sub = sample_subgraph(graph, review_ids, hops=hops, cap=cap, rng=rng)
        return ReviewBatch(
            review_ids=review_ids,
            labels=labels[review_ids],
            text=self.branch_text[review_ids],
            meta=self.branch_meta[review_ids],
            subgraph=sub,
            node_text=self.node_text[sub.nodes],
            node_meta=self.node_meta[sub.nodes],
        )


def _batches(ids, batch_size):
    for start in range(0, len(ids), batch_size):
        yield ids[start : start + batch_size]


def evaluate_split(model, graph, source, labels, ids, seed, batch_size=64,
                   capture_attention=False):
    """Deterministic eval over a split; returns metrics plus raw scores."""
    cfg = model.config
    scores = np.zeros(len(ids), dtype=np.float64)
    fusion_caps, gat_caps = [], []
    pos = 0
    for bi, chunk in enumerate(_batches(np.asarray(ids, dtype=np.int64), batch_size)):
        rng = np.random.default_rng([seed, _STREAM_EVAL, bi])
        batch = source.batch(graph, chunk, labels, rng, cfg.hops, cfg.neighbor_cap)
        out = model.forward(
            batch, training=False, capture_attention=capture_attention,
            capture_gat=capture_attention,
        )
        probs = T.softmax(out.logits, axis=1).data[:, 1]
        scores[pos : pos + len(chunk)] = probs
        pos += len(chunk)
        if capture_attention:
            if out.fusion_attention is not None:
                fusion_caps.append(out.fusion_attention)
            if out.gat_capture is not None:
                gat_caps.append((out.gat_capture, batch.subgraph.node_types))
    metrics = evaluate_metrics(scores, labels[np.asarray(ids, dtype=np.int64)])
    return metrics, scores, fusion_caps, gat_caps


@dataclass
class TrainResult:
    model: SpoilerModel
    profiles: EmbeddingMatrix | None
    report: Report
    best_state: dict


def train(dataset, model_cfg, train_cfg, out_dir=None, log=None):
    """Pretext phase + backbone phase; returns the best-epoch model."""
    t_start = time.perf_counter()
    tc, mc = train_cfg, model_cfg
    labels = dataset.labels()
    train_ids = np.array(dataset.split_ids("train"), dtype=np.int64)
    val_ids = np.array(dataset.split_ids("val"), dtype=np.int64)
    test_ids = np.array(dataset.split_ids("test"), dtype=np.int64)
    if len(train_ids) == 0:
        raise ContractError("training split is empty")

    meta_table = build_meta_vectors(dataset, mc.meta_dim)

    profiles = None
    pretext_losses = []
    pretext_skipped = 0
    if mc.use_profile:
        seqs = build_user_sequences(dataset, mc.ut_max_len)
        encoder = ProfileEncoder(
            mc.ut_dim, mc.ut_heads, mc.ut_ff, mc.ut_layers, mc.ut_max_len,
            dropout=mc.ut_dropout, seed=tc.seed + 7919,
        )
        pretext_losses = train_pretext(
            encoder, seqs, labels, epochs=tc.pretext_epochs, lr=tc.pretext_lr,
            gamma=tc.pretext_gamma, weight_decay=tc.pretext_weight_decay,
            batch_size=tc.pretext_batch_size, seed=tc.seed,
        )
        profiles = encoder.extract(seqs)
        pretext_skipped = encoder.no_train_batches

    graph = build_graph(dataset)
    source = FeatureSource(dataset, meta_table, profiles)
    model = SpoilerModel(mc, seed=tc.seed)
    opt = AdamW(model.registry, lr=tc.lr, weight_decay=tc.weight_decay)
    order_rng = np.random.default_rng([tc.seed, _STREAM_ORDER])

    initial_loss = _mean_train_loss(model, graph, source, labels, train_ids, tc)

    epoch_rows = []
    best = {"epoch": -1, "val_f1": -1.0}
    best_state = model.registry.state_dict()
    for epoch in range(tc.epochs):
        order = train_ids[order_rng.permutation(len(train_ids))]
        sample_rng = np.random.default_rng([tc.seed, _STREAM_SAMPLE, epoch])
        noise_rng = np.random.default_rng([tc.seed, _STREAM_NOISE, epoch])
        total_ce, n_seen = 0.0, 0
        loads = {}
        for chunk in _batches(order, tc.batch_size):
            batch = source.batch(graph, chunk, labels, sample_rng, mc.hops, mc.neighbor_cap)
            out = model.forward(batch, training=True, rng=noise_rng)
            loss, parts = total_loss(
                out.logits, batch.labels, model.registry, out.gates,
                lambda_l2=mc.lambda_l2, w_balance=mc.w_balance,
            )
            model.registry.zero_grads()
            T.backward(loss)
            model.registry.fill_missing_grads()
            opt.step()
            total_ce += parts["ce"]
            n_seen += len(chunk)
            for mod, gate in out.gates.items():
                acc = loads.setdefault(mod, np.zeros(mc.n_experts, dtype=np.float64))
                acc += gate.load_np()
        opt.lr = lr_exponential_step(opt.lr, tc.gamma)

        val_metrics, _, _, _ = evaluate_split(
            model, graph, source, labels, val_ids, tc.seed, tc.batch_size
        ) if len(val_ids) else ({"f1": None, "auc": None, "acc": None}, None, None, None)
        test_metrics, _, _, _ = evaluate_split(
            model, graph, source, labels, test_ids, tc.seed, tc.batch_size
        ) if len(test_ids) else ({"f1": None, "auc": None, "acc": None}, None, None, None)

        row = {
            "epoch": epoch + 1,
            "train_loss": total_ce / max(n_seen, 1),
            "lr": opt.lr,
            "val": val_metrics,
            "test": test_metrics,
            "expert_load": {m: [float(x) for x in v] for m, v in loads.items()},
        }
        epoch_rows.append(row)
        if log:
            log(f"epoch {epoch + 1}/{tc.epochs} loss {row['train_loss']:.4f} "
                f"val_f1 {val_metrics['f1']} test_auc {test_metrics['auc']}")

        if val_metrics["f1"] is None:
            take = True  # no validation signal: keep the latest parameters
        else:
            take = val_metrics["f1"] > best["val_f1"]
        if take:
            best = {"epoch": epoch + 1, "val_f1": val_metrics["f1"] or -1.0}
            best_state = model.registry.state_dict()

    model.registry.load_state_dict(best_state)
    best_val, _, _, _ = evaluate_split(
        model, graph, source, labels, val_ids, tc.seed, tc.batch_size
    ) if len(val_ids) else ({"f1": None, "auc": None, "acc": None}, None, None, None)
    best_test, _, _, _ = evaluate_split(
        model, graph, source, labels, test_ids, tc.seed, tc.batch_size
    ) if len(test_ids) else ({"f1": None, "auc": None, "acc": None}, None, None, None)

    report = Report(
        config={"model": mc.to_dict(), "train": tc.to_dict()},
        seed=tc.seed,
        wall_clock_sec=time.perf_counter() - t_start,
        epochs=epoch_rows,
        best={"epoch": best["epoch"], "val": best_val, "test": best_test},
        extra={
            "initial_train_loss": initial_loss,
            "pretext_losses": [float(x) for x in pretext_losses],
            "graph_stats": graph.stats(),
            "pretext_skipped_batches": pretext_skipped,
        },
    )

    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.mmoe", mc, model.registry)
        if profiles is not None:
            save_embeddings(out / "user_profile.f32", profiles)
        report.save(out / "report.json")
    return TrainResult(model=model, profiles=profiles, report=report, best_state=best_state)


def _mean_train_loss(model, graph, source, labels, train_ids, tc):
    """Mean per-review CE of the untouched model (learnability baseline)."""
    total, n = 0.0, 0
    for bi, chunk in enumerate(_batches(train_ids, tc.batch_size)):
        rng = np.random.default_rng([tc.seed, _STREAM_EVAL, bi])
        batch = source.batch(graph, chunk, labels, rng, model.config.hops,
                             model.config.neighbor_cap)
        out = model.forward(batch, training=False)
        ce = T.tsum(T.cross_entropy(out.logits, batch.labels))
        total += ce.item()
        n += len(chunk)
    return total / max(n, 1)


# ---------------------------------------------------------------------------
# robustness perturbations
# ---------------------------------------------------------------------------


def _mask_elements(matrix, rate, rng):
    if rate == 0.0:
        return matrix
    keep = rng.random(matrix.shape) >= rate
    return (matrix * keep).astype(matrix.dtype)


def perturb(model, profiles, dataset, spec, seed=0, batch_size=64):
    """Evaluate a trained model under increasing input corruption."""
    mc = model.config
    labels = dataset.labels()
    test_ids = np.array(dataset.split_ids("test"), dtype=np.int64)
    meta_table = build_meta_vectors(dataset, mc.meta_dim)
    base_graph = build_graph(dataset)
    mode_tag = {"edges": 0, "text": 1, "meta": 2}[spec.mode]
    rows = []
    for rate in spec.rates:
        rate_tag = int(round(rate * 1_000_000_000))
        rng = np.random.default_rng([spec.seed, mode_tag, rate_tag])
        graph = base_graph
        branch_text = None
        branch_meta = None
        if spec.mode == "edges":
            graph = drop_edges(base_graph, rate, rng)
        elif spec.mode == "text":
            branch_text = _mask_elements(dataset.review_text.data, rate, rng)
        else:
            branch_meta = _mask_elements(meta_table.review, rate, rng)
        source = FeatureSource(dataset, meta_table, profiles, branch_text, branch_meta)
        metrics, _, _, _ = evaluate_split(
            model, graph, source, labels, test_ids, seed, batch_size
        )
        rows.append({"rate": float(rate), **metrics})
    return Report(
        config={"model": mc.to_dict(), "perturb": asdict(spec)},
        seed=seed,
        curves=rows,
    )


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "full": lambda c: c,
    "no_graph": lambda c: replace(c, use_graph=False),
    "no_text": lambda c: replace(c, use_text=False),
    "no_meta": lambda c: replace(c, use_meta=False),
    "no_moe": lambda c: replace(c, moe_mode="none"),
    "moe_mlp": lambda c: replace(c, moe_mode="mlp"),
    "experts_4": lambda c: replace(c, n_experts=4),
    "experts_8": lambda c: replace(c, n_experts=8),
    "fuse_concat": lambda c: replace(c, fusion_mode="concatenate"),
    "fuse_mean": lambda c: replace(c, fusion_mode="mean_pool"),
    "fuse_max": lambda c: replace(c, fusion_mode="max_pool"),
    "no_profile": lambda c: replace(c, use_profile=False),
}


def ablate(dataset, base_cfg, train_cfg, variant, out_dir=None, log=None):
    """Train and evaluate one ablated configuration."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(
            f"unknown ablation variant {variant!r}; supported: {sorted(ABLATION_VARIANTS)}"
        )
    cfg = ABLATION_VARIANTS[variant](base_cfg)
    result = train(dataset, cfg, train_cfg, out_dir=out_dir, log=log)
    result.report.extra["variant"] = variant
    return result


# ---------------------------------------------------------------------------
# attention analysis & embedding export
# ---------------------------------------------------------------------------


def analyze_attention(model, profiles, dataset, seed=0, batch_size=64, split="test"):
    """Average fusion attention (graph/text/meta order) and GAT edge attention."""
    mc = model.config
    labels = dataset.labels()
    ids = dataset.split_ids(split)
    if not ids:
        raise ContractError(f"attention analysis: split {split!r} is empty")
    meta_table = build_meta_vectors(dataset, mc.meta_dim)
    graph = build_graph(dataset)
    source = FeatureSource(dataset, meta_table, profiles)
    _, _, fusion_caps, gat_caps = evaluate_split(
        model, graph, source, labels, ids, seed, batch_size, capture_attention=True
    )
    fusion_avg = average_fusion_attention(fusion_caps)
    gat_summary = (
        gat_edge_attention_summary(gat_caps, mc.gnn_layers) if model.graph_enc else None
    )
    return {
        "fusion_attention": None
        if fusion_avg is None
        else {"order": ["graph", "text", "meta"], "matrix": fusion_avg.tolist()},
        "gat_attention_by_edge_type": gat_summary,
    }


def export_embeddings(model, profiles, dataset, out_dir, seed=0, batch_size=64):
    """Write per-modality expert outputs (and gate picks) for external T-SNE."""
    from pathlib import Path

    mc = model.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = dataset.labels()
    meta_table = build_meta_vectors(dataset, mc.meta_dim)
    graph = build_graph(dataset)
    source = FeatureSource(dataset, meta_table, profiles)
    n = len(dataset.reviews)
    mods = mc.active_modalities()
    z_rows = {m: np.zeros((n, mc.fusion_dim), dtype=np.float32) for m in mods}
    picks = {m: np.zeros(n, dtype=np.int64) for m in mods} if mc.moe_mode == "moe" else {}
    all_ids = np.arange(n, dtype=np.int64)
    for bi, chunk in enumerate(_batches(all_ids, batch_size)):
        rng = np.random.default_rng([seed, _STREAM_EVAL, bi])
        batch = source.batch(graph, chunk, labels, rng, mc.hops, mc.neighbor_cap)
        out_fwd = model.forward(batch, training=False)
        z = _branch_outputs(model, batch, out_fwd)
        for m in mods:
            z_rows[m][chunk] = z[m]
        for m, gate in out_fwd.gates.items():
            picks[m][chunk] = gate.weights_np().argmax(axis=1)
    written = []
    for m in mods:
        path = out / f"expert_{m}.f32"
        save_embeddings(path, EmbeddingMatrix(f"expert_{m}", n, mc.fusion_dim, z_rows[m]))
        written.append(str(path))
    if picks:
        with open(out / "expert_assignments.json", "w", encoding="utf-8") as fh:
            json.dump({m: picks[m].tolist() for m in picks}, fh)
        written.append(str(out / "expert_assignments.json"))
    return written


def _branch_outputs(model, batch, out_fwd):
    """Recompute per-modality fusion tokens for export (eval mode, no noise)."""
    mc = model.config
    z = {}
    if mc.use_meta:
        x = model.meta_mlp(T.Tensor(batch.meta))
        z["meta"] = model._route("meta", x, False, None, {}).data
    if mc.use_text:
        x = T.relu(model.text_proj(T.Tensor(batch.text)))
        z["text"] = model._route("text", x, False, None, {}).data
    if mc.use_graph:
        feats = init_node_features(batch.subgraph, batch.node_text, batch.node_meta)
        nodes = model.graph_enc(feats, batch.subgraph, training=False)
        x = T.gather_rows(nodes, batch.subgraph.seed_positions)
        z["graph"] = model._route("graph", x, False, None, {}).data
    return z


def curves_to_csv(rows):
    lines = ["rate,f1,auc,acc"]
    for r in rows:
        auc = "" if r["auc"] is None else f"{r['auc']:.6f}"
        f1 = "" if r["f1"] is None else f"{r['f1']:.6f}"
        acc = "" if r["acc"] is None else f"{r['acc']:.6f}"
        lines.append(f"{r['rate']},{f1},{auc},{acc}")
    return "\n".join(lines) + "\n"
