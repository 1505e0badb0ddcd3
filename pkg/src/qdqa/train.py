"""Joint training harness on synthetic clusters: backbone + clip aligner +
graph aggregator, with ablation flags gating each loss term.

Everything is batched over nodes (videos stacked along a leading axis) so a
full run stays in the seconds-to-minutes range on a plain CPU, and fully
deterministic given the run seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import aggregator, aligner, autodiff as ad, metrics
from .autodiff import Adam, ParamStore, ShapeError, Tensor
from .synth import ConfigError, SyntheticConfig, generate_dataset


class NonFiniteLossError(ArithmeticError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    h: int = 16  # joint feature width
    layers: int = 2  # aggregator attention depth
    heads: int = 2
    temperature: float = 1.0
    margin: float = 1.0
    lr: float = 1e-2
    grad_clip: float = 5.0  # global gradient-norm cap; 0 disables
    steps: int = 2000
    batch_clusters: int = 8
    eval_every: int = 250
    use_aligner: bool = True
    use_aggregator: bool = True
    use_triplet: bool = True
    use_contrastive: bool = True
    alignment_weight: float = 1.0
    aggregation_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticConfig(**self.synthetic)
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if min(self.h, self.layers, self.heads, self.batch_clusters,
               self.eval_every) < 1:
            raise ConfigError("all model/loop dimensions must be >= 1")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("lr and temperature must be positive")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        if self.use_aligner and self.synthetic.h_q != self.synthetic.h_v:
            raise ConfigError(
                "the aligner fuses question tokens into video space and "
                "needs h_q == h_v"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))


@dataclass
class RunReport:
    config: dict
    epochs: list  # one dict per evaluation point
    best_step: int
    best_validation: dict
    test: dict
    relevance: dict  # precision/recall of the hard indicator, or {}
    wall_clock: float = 0.0

    def to_json(self) -> str:
        """Canonical report; excludes wall-clock so reruns are
        byte-identical."""
        payload = {
            "config": self.config,
            "epochs": self.epochs,
            "best_step": self.best_step,
            "best_validation": self.best_validation,
            "test": self.test,
            "relevance": self.relevance,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def epochs_csv(self) -> str:
        cols = ["step", "train_loss", "answer_ce", "contrastive",
                "aggregation", "val_main_acc", "val_sub_acc", "val_c_f",
                "val_nc_f", "val_rel_precision", "val_rel_recall"]
        lines = [",".join(cols)]
        for row in self.epochs:
            lines.append(",".join(
                "" if row.get(c) is None else f"{row[c]:.6f}"
                for c in cols
            ))
        return "\n".join(lines) + "\n"


@dataclass
class PackedSplit:
    """One dataset split flattened to node-major arrays."""

    graphs: list
    f_o: np.ndarray  # [N, n_c, n_f, n_o, h_v]
    f_a: np.ndarray
    f_m: np.ndarray
    f_q: np.ndarray  # [N, n_q, h_q]
    gold: np.ndarray  # [N] vocab indices
    node_ids: list
    planted: list  # [N] sorted planted-relevant clip lists
    clusters: list  # (graph, {node id -> global row})

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def pack_split(instances, vocab_index: dict) -> PackedSplit:
    f_o, f_a, f_m, f_q, gold = [], [], [], [], []
    node_ids, planted, clusters, graphs = [], [], [], []
    for inst in instances:
        rows = {}
        for node in inst.graph.nodes:  # nodes are id-sorted
            rows[node.id] = len(node_ids)
            v = inst.videos[node.id]
            f_o.append(v.f_o)
            f_a.append(v.f_a)
            f_m.append(v.f_m)
            f_q.append(inst.question_features[node.id])
            gold.append(vocab_index[inst.gold[node.id]])
            node_ids.append(node.id)
            planted.append(inst.planted_relevance[node.id])
        clusters.append((inst.graph, rows))
        graphs.append(inst.graph)
    return PackedSplit(
        graphs=graphs,
        f_o=np.stack(f_o), f_a=np.stack(f_a), f_m=np.stack(f_m),
        f_q=np.stack(f_q), gold=np.asarray(gold, dtype=np.int64),
        node_ids=node_ids, planted=planted, clusters=clusters,
    )


def init_params(config: RunConfig) -> ParamStore:
    store = ParamStore(seed=config.seed)
    sc = config.synthetic
    vocab = len(sc.vocab)
    if config.use_aligner:
        aligner.init_aligner_params(store, sc.h_v, config.heads)
        # question anchor for the contrastive alignment term
        store.linear("al.q_anchor", sc.h_q, sc.h_v)
    aligner.init_backbone_params(store, sc.h_v, sc.h_q, config.h)
    aligner.init_answer_head(store, config.h, vocab)
    if config.use_aggregator:
        aggregator.init_aggregator_params(store, config.h, config.layers,
                                          vocab)
    return store


def _broadcast_tokens(f_q: Tensor, lead: tuple) -> Tensor:
    """[B, n_q, h] -> [B, *lead, n_q, h] so attention keys line up with a
    query that carries extra structural axes."""
    b, n_q, h = f_q.shape
    r = ad.reshape(f_q, (b,) + (1,) * len(lead) + (n_q, h))
    return ad.add(r, Tensor(np.zeros((b,) + lead + (n_q, h))))


def _clip_pipeline(f_o, f_a, f_m, f_q, store, config):
    """Batched object->frame hierarchy; returns (f_m_c [B,n_c,2h],
    clips [B,n_c,h])."""
    n_c, n_f = f_o.shape[1], f_o.shape[2]
    fq_obj = _broadcast_tokens(f_q, (n_c, n_f))
    obj = aligner.aggregate_objects(f_o, f_a, fq_obj, store, config.heads)
    fq_frm = _broadcast_tokens(f_q, (n_c,))
    f_m_c = aligner.aggregate_frames(obj, f_m, fq_frm, store, config.heads)
    clips = aligner._lin(f_m_c, store, "al.proj_m")
    return f_m_c, clips


def _force_nonempty_rows(ind: Tensor, logits: Tensor) -> Tensor:
    """Keep both clip sets non-empty per row; identity backward, like the
    straight-through trick itself.

    All-irrelevant rows get their best relevance-logit clip flipped on;
    all-relevant rows get their worst clip flipped off.  The latter removes
    the trivial zero of the contrastive loss at the all-relevant indicator
    (degenerate negative view, replacement view equal to the original)."""
    data = ind.data
    n_c = data.shape[-2]
    no_rel = data[..., 0].sum(axis=-1) == 0
    no_irr = data[..., 1].sum(axis=-1) == 0
    if not (no_rel.any() or (n_c > 1 and no_irr.any())):
        return ind
    patched = data.copy()
    rows = np.nonzero(no_rel)[0]
    best = logits.data[rows, :, 0].argmax(axis=-1)
    patched[rows, best] = [1.0, 0.0]
    if n_c > 1:
        rows = np.nonzero(no_irr)[0]
        worst = logits.data[rows, :, 0].argmin(axis=-1)
        patched[rows, worst] = [0.0, 1.0]
    return ad._make(patched, (ind,), lambda g: (g,))


def _indicator(f_m_c, f_q, store, config, noise) -> tuple[Tensor, Tensor]:
    """Hard straight-through indicator [B, n_c, 2] plus its logits."""
    logits = aligner.clip_scores(f_m_c, f_q, store, config.heads)
    ind = ad.gumbel_softmax(logits, temperature=config.temperature,
                            hard=True, noise=noise)
    return _force_nonempty_rows(ind, logits), logits


def _clip_gradients(store: ParamStore, max_norm: float) -> None:
    """Scale all gradients so their global norm is at most max_norm.
    Late in training the loss sits near zero and a single Gumbel flip can
    produce a step large enough to wreck the converged solution; the cap
    keeps such excursions bounded."""
    if max_norm <= 0:
        return
    total = 0.0
    for t in store.params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for t in store.params.values():
            if t.grad is not None:
                t.grad *= scale


def _gumbel_noise(rng, shape) -> np.ndarray:
    u = rng.uniform(low=np.finfo(float).tiny, high=1.0, size=shape)
    return -np.log(-np.log(u))


def _softplus_mean(x: Tensor) -> Tensor:
    """Numerically stable mean softplus over a batch vector."""
    sign = np.where(x.data >= 0, 1.0, -1.0)
    absx = ad.mul(x, sign)
    soft = ad.add(ad.relu(x),
                  ad.log(ad.add(ad.exp(ad.mul(absx, -1.0)), 1.0)))
    return ad.reduce_mean(soft)


def forward_losses(pack: PackedSplit, cluster_ids, store: ParamStore,
                   config: RunConfig, rng=None, noise=None):
    """Gated loss terms on a batch of whole clusters.

    Returns (terms dict, total Tensor, per-cluster answer dists map).
    Terms that are gated off are never computed and never consume
    randomness, so a reduced model is reproduced bit-identically.
    """
    batch_clusters = [pack.clusters[i] for i in cluster_ids]
    rows = np.concatenate([
        np.fromiter(rows_map.values(), dtype=np.int64)
        for _, rows_map in batch_clusters
    ])
    local = {}
    for _, rows_map in batch_clusters:
        for nid in rows_map:
            local[nid] = len(local)
    f_q = Tensor(pack.f_q[rows])
    gold = pack.gold[rows]
    terms = {}

    if config.use_aligner:
        f_o_np, f_a_np, f_m_np = (pack.f_o[rows], pack.f_a[rows],
                                  pack.f_m[rows])
        f_m_c, clips = _clip_pipeline(Tensor(f_o_np), Tensor(f_a_np),
                                      Tensor(f_m_np), f_q, store, config)
        if noise is None:
            noise = _gumbel_noise(rng, f_m_c.shape[:-1] + (2,))
        ind, _ = _indicator(f_m_c, f_q, store, config, noise)
        w_rel = ad.getitem(ind, (slice(None), slice(None), 0))
        joint = aligner.backbone_joint(clips, f_q, store, clip_weights=w_rel)
        if config.use_contrastive:
            # per-clip question alignment: every clip the indicator marks
            # relevant must score positively against its question anchor,
            # every marked-irrelevant clip negatively.  Anchoring on the
            # question keeps the loss sensitive to WHICH clips are
            # selected, and the per-clip form makes each genuinely
            # question-correlated clip pull toward inclusion, so partial
            # selections cannot satisfy the loss the way they can with
            # pooled views.
            q_anchor = aligner._lin(ad.reduce_mean(f_q, axis=-2), store,
                                    "al.q_anchor")  # [B, h_v]
            b = q_anchor.shape[0]
            s = ad.reduce_sum(
                ad.mul(ad.reshape(q_anchor, (b, 1, q_anchor.shape[-1])),
                       clips),
                axis=-1,
            )  # [B, n_c]
            w_irr = ad.getitem(ind, (slice(None), slice(None), 1))
            sign = ad.add(w_irr, ad.mul(w_rel, -1.0))
            terms["contrastive"] = _softplus_mean(ad.mul(s, sign))
    else:
        joint = aligner.backbone_joint(Tensor(pack.f_m[rows]), f_q, store)

    head = aligner.answer_logits(joint, store)
    terms["answer_ce"] = ad.softmax_cross_entropy_batch(head, gold)

    dists = {}
    if config.use_aggregator:
        graph_logits = []
        for g, rows_map in batch_clusters:
            feats = {nid: ad.getitem(joint, local[nid]) for nid in rows_map}
            order, outputs, _ = aggregator.gat_forward(
                feats, g, store, config.layers
            )
            logits_map, dist_map = aggregator.predict_answers(
                order, outputs, store
            )
            graph_logits.append((g, logits_map))
            dists.update(dist_map)
        if config.use_triplet:
            reprs = aggregator.edge_representations(
                [(g, lm) for g, lm in graph_logits], store
            )
            triplet = aggregator.edge_triplet_loss(reprs, config.margin,
                                                   rng)
        else:
            triplet = Tensor(0.0)
        terms["aggregation"] = aggregator.aggregation_loss(
            graph_logits, triplet, config.synthetic.vocab_index
        )
    else:
        sm = ad.softmax(head, axis=-1)
        dists = {nid: ad.getitem(sm, local[nid]) for nid in local}

    total = ad.mul(terms["answer_ce"], config.alignment_weight)
    if "contrastive" in terms:
        total = ad.add(total, ad.mul(terms["contrastive"],
                                     config.alignment_weight))
    if "aggregation" in terms:
        total = ad.add(total, ad.mul(terms["aggregation"],
                                     config.aggregation_weight))
    return terms, total, dists


def predict_split(store: ParamStore, config: RunConfig, pack: PackedSplit):
    """Deterministic (zero-noise) predictions over a whole split.

    Returns (predictions: node id -> answer token, relevance stats dict).
    """
    _check_dims(store, config)
    vocab = config.synthetic.vocab
    f_q = Tensor(pack.f_q)
    relevance = {}
    if config.use_aligner:
        f_m_c, clips = _clip_pipeline(Tensor(pack.f_o), Tensor(pack.f_a),
                                      Tensor(pack.f_m), f_q, store, config)
        zero = np.zeros(f_m_c.shape[:-1] + (2,))
        ind, _ = _indicator(f_m_c, f_q, store, config, zero)
        w_rel = ad.getitem(ind, (slice(None), slice(None), 0))
        joint = aligner.backbone_joint(clips, f_q, store, clip_weights=w_rel)
        hit = planted = chosen = 0
        for i, rel in enumerate(pack.planted):
            picked = set(np.nonzero(ind.data[i, :, 0] > 0.5)[0])
            hit += len(picked & set(rel))
            planted += len(rel)
            chosen += len(picked)
        relevance = {
            "recall": hit / planted if planted else 0.0,
            "precision": hit / chosen if chosen else 0.0,
        }
    else:
        joint = aligner.backbone_joint(Tensor(pack.f_m), f_q, store)

    if config.use_aggregator:
        predictions = {}
        for g, rows_map in pack.clusters:
            feats = {nid: ad.getitem(joint, row)
                     for nid, row in rows_map.items()}
            order, outputs, _ = aggregator.gat_forward(
                feats, g, store, config.layers
            )
            _, dist_map = aggregator.predict_answers(order, outputs, store)
            for nid, dist in dist_map.items():
                predictions[nid] = vocab[int(np.argmax(dist.data))]
    else:
        head = aligner.answer_logits(joint, store).data
        picks = head.argmax(axis=-1)
        predictions = {nid: vocab[int(picks[i])]
                       for i, nid in enumerate(pack.node_ids)}
    return predictions, relevance


def _check_dims(store: ParamStore, config: RunConfig):
    sc = config.synthetic
    expect = (sc.h_v + sc.h_q, config.h)
    if store["bb.l1.w"].shape != expect:
        raise ShapeError(
            f"checkpoint width {store['bb.l1.w'].shape} != {expect}"
        )


def evaluate(store: ParamStore, config: RunConfig, pack: PackedSplit,
             beta: float = 1.0):
    """Side-effect-free split evaluation; returns (MetricsReport,
    relevance stats)."""
    predictions, relevance = predict_split(store, config, pack)
    return metrics.full_report(pack.graphs, predictions, beta), relevance


def evaluate_predictions(graphs, predictions, beta: float = 1.0):
    """Report for externally supplied predictions (oracle injection)."""
    return metrics.full_report(graphs, predictions, beta)


def _epoch_row(step, loss_avgs, report, relevance):
    return {
        "step": step,
        "train_loss": loss_avgs.get("total"),
        "answer_ce": loss_avgs.get("answer_ce"),
        "contrastive": loss_avgs.get("contrastive"),
        "aggregation": loss_avgs.get("aggregation"),
        "val_main_acc": report.accuracy["main"]["all"],
        "val_sub_acc": report.accuracy["sub"]["all"],
        "val_c_f": report.c_f,
        "val_nc_f": report.nc_f,
        "val_rel_precision": relevance.get("precision"),
        "val_rel_recall": relevance.get("recall"),
    }


def train(config: RunConfig, out_dir=None) -> tuple[RunReport, ParamStore]:
    """Optimize the gated joint loss; checkpoint the best validation c-F1.

    Returns (report, store-with-best-parameters).  With out_dir, also
    writes report.json, epochs.csv, runtime.json, and checkpoint/.
    """
    started = time.monotonic()
    rng = np.random.default_rng([config.seed, 77])
    ds = generate_dataset(config.synthetic)
    vocab_index = config.synthetic.vocab_index
    train_pack = pack_split(ds.train, vocab_index)
    val_pack = pack_split(ds.validation, vocab_index)
    test_pack = pack_split(ds.test, vocab_index)

    store = init_params(config)
    opt = Adam(store, lr=config.lr)

    report0, rel0 = evaluate(store, config, val_pack)
    epochs = [_epoch_row(0, {}, report0, rel0)]
    best = {"step": 0, "c_f": report0.c_f,
            "params": {n: t.data.copy() for n, t in store.params.items()},
            "row": epochs[0]}

    queue: list[int] = []
    sums: dict[str, float] = {}
    n_batches = 0
    for step in range(1, config.steps + 1):
        while len(queue) < config.batch_clusters:
            queue.extend(rng.permutation(len(train_pack.clusters)).tolist())
        batch = queue[:config.batch_clusters]
        del queue[:config.batch_clusters]

        # linear warmdown: locks the solution in late in training instead
        # of letting a rare large step wreck a converged model
        opt.lr = config.lr * (1.0 - (step - 1) / max(config.steps, 1))
        terms, total, _ = forward_losses(train_pack, batch, store, config,
                                         rng)
        if not np.isfinite(total.data):
            raise NonFiniteLossError(
                f"non-finite loss at step {step}",
                dump={"step": step,
                      **{k: float(v.data) for k, v in terms.items()}},
            )
        store.zero_grad()
        total.backward()
        _clip_gradients(store, config.grad_clip)
        opt.step()

        sums["total"] = sums.get("total", 0.0) + float(total.data)
        for name, t in terms.items():
            sums[name] = sums.get(name, 0.0) + float(t.data)
        n_batches += 1

        if step % config.eval_every == 0 or step == config.steps:
            report, rel = evaluate(store, config, val_pack)
            avgs = {k: v / n_batches for k, v in sums.items()}
            row = _epoch_row(step, avgs, report, rel)
            epochs.append(row)
            sums, n_batches = {}, 0
            if report.c_f > best["c_f"] or (
                report.c_f == best["c_f"]
                and row["val_main_acc"] > best["row"]["val_main_acc"]
            ):
                best = {"step": step, "c_f": report.c_f,
                        "params": {n: t.data.copy()
                                   for n, t in store.params.items()},
                        "row": row}

    for name, data in best["params"].items():
        store.params[name].data = data.copy()
    test_report, test_rel = evaluate(store, config, test_pack)

    report = RunReport(
        config=json.loads(config.to_json()),
        epochs=epochs,
        best_step=best["step"],
        best_validation=best["row"],
        test=json.loads(metrics.emit_report(test_report)),
        relevance=test_rel,
        wall_clock=time.monotonic() - started,
    )
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "epochs.csv").write_text(report.epochs_csv())
        (out / "runtime.json").write_text(
            json.dumps({"wall_clock": report.wall_clock}) + "\n"
        )
        store.save(out / "checkpoint")
        (out / "run_config.json").write_text(config.to_json())
    return report, store


ABLATION_ROWS = (
    ("backbone", dict(use_aligner=False, use_aggregator=False,
                      use_triplet=False, use_contrastive=False)),
    ("aligner", dict(use_aligner=True, use_aggregator=False,
                     use_triplet=False, use_contrastive=True)),
    ("aggregator", dict(use_aligner=False, use_aggregator=True,
                        use_triplet=False, use_contrastive=False)),
    ("aggregator_triplet", dict(use_aligner=False, use_aggregator=True,
                                use_triplet=True, use_contrastive=False)),
    ("full", dict(use_aligner=True, use_aggregator=True, use_triplet=True,
                  use_contrastive=True)),
)


def ablation_configs(base: RunConfig, rows=ABLATION_ROWS):
    """Variants sharing the base seed and data, differing only in flags."""
    raw = asdict(base)
    out = []
    for name, flags in rows:
        cfg = dict(raw)
        cfg.update(flags)
        out.append((name, RunConfig(**cfg)))
    return out


def ablate(base: RunConfig, rows=ABLATION_ROWS) -> dict:
    """Train every flag variant; rows of best-validation metrics."""
    table = {}
    for name, cfg in ablation_configs(base, rows):
        report, _ = train(cfg)
        row = report.best_validation
        table[name] = {
            "main_acc": row["val_main_acc"],
            "sub_acc": row["val_sub_acc"],
            "c_f": row["val_c_f"],
            "nc_f": row["val_nc_f"],
        }
    return table


def ablation_csv(table: dict) -> str:
    cols = ["row", "main_acc", "sub_acc", "c_f", "nc_f"]
    lines = [",".join(cols)]
    for name, row in table.items():
        lines.append(",".join(
            [name] + [f"{row[c]:.4f}" for c in cols[1:]]
        ))
    return "\n".join(lines) + "\n"
