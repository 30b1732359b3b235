"""Attack campaigns, reports and the desk-scale scenario recipes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .attack import AttackConfig, cg_attack, project_ball
from .classifier import AdvLossSpec, ClassifierModel, QueryOracle, TrainConfig, accuracy, train_classifier
from .data import DataConfig, Dataset, split_openset, train_test
from .energy import KLTrainConfig, pretrain_flow
from .flow import CondFlow, FlowConfig
from .latent import DctDecoder, default_scale

log = logging.getLogger(__name__)

SCENARIOS = ("closed-set", "open-set-1", "open-set-2")


# ---------------------------------------------------------------- reports


def lower_median(values: Sequence[float]):
    """Middle element, or the lower of the two middle elements for even counts."""
    if not values:
        return None
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class ExperimentReport:
    asr: float | None  # percent of attempted images; None when nothing was attempted
    mean_queries: float | None  # over successful attacks only
    median_queries: int | None
    attempted: int
    successes: int
    skipped: list[int] = field(default_factory=list)  # image ids that already met the goal
    per_example: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        return cls.from_json(Path(path).read_text())

    def table(self, label: str = "") -> str:
        def fmt(v, spec):
            return "-" if v is None else format(v, spec)
        head = f"{'run':<24}{'ASR':>8}{'Mean':>10}{'Median':>8}{'n':>6}{'skip':>6}"
        label = label or str(self.config.get("transfer_mode", ""))
        row = (f"{label:<24}{fmt(self.asr, '.1f'):>8}{fmt(self.mean_queries, '.1f'):>10}"
               f"{fmt(self.median_queries, 'd'):>8}{self.attempted:>6}{len(self.skipped):>6}")
        return head + "\n" + row


def summarize(records: list[dict], config: dict | None = None,
              skipped: Sequence[int] = ()) -> ExperimentReport:
    wins = [int(r["queries"]) for r in records if r["success"]]
    n = len(records)
    return ExperimentReport(
        asr=100.0 * len(wins) / n if n else None,
        mean_queries=sum(wins) / len(wins) if wins else None,
        median_queries=lower_median(wins),
        attempted=n,
        successes=len(wins),
        skipped=[int(i) for i in skipped],
        per_example=list(records),
        config=dict(config or {}),
    )


def verify_report(report: ExperimentReport) -> bool:
    """Recompute the summary from ``per_example`` and compare exactly."""
    again = summarize(report.per_example, report.config, report.skipped)
    return (again.asr, again.mean_queries, again.median_queries, again.attempted, again.successes) == (
        report.asr, report.mean_queries, report.median_queries, report.attempted, report.successes)


# ---------------------------------------------------------------- campaigns


def image_seed(master: int, image_id: int) -> int:
    return int(np.random.SeedSequence([int(master), int(image_id)]).generate_state(1)[0])


def already_done(model, x: np.ndarray, y: int, spec: AdvLossSpec) -> bool:
    """Goal met without a perturbation (untargeted: misclassified; targeted: label is the target)."""
    if spec.targeted:
        return int(y) == spec.target
    return int(model.predict(x)) != int(y)


@dataclass
class CampaignTotals:
    queries: int = 0  # sum of per-attack oracle counters
    infeasible: int = 0


def run_campaign(target, flow: CondFlow, decoder, images: np.ndarray, labels: np.ndarray,
                 cfg: AttackConfig, image_ids: Sequence[int] | None = None,
                 extra_config: dict | None = None) -> tuple[ExperimentReport, CampaignTotals]:
    """Attack every image with a fresh oracle and per-image seed ``image_seed(cfg.seed, id)``.

    Skipping uses the target's benign prediction and costs no query.
    """
    images = np.asarray(images, dtype=np.float64)
    ids = list(range(len(images))) if image_ids is None else [int(i) for i in image_ids]
    spec = cfg.spec
    spec.check_classes(target.num_classes)
    records, skipped = [], []
    totals = CampaignTotals()
    for i, image_id in enumerate(ids):
        x, y = images[i], int(labels[i])
        if already_done(target, x, y, spec):
            skipped.append(image_id)
            continue
        oracle = QueryOracle(target)
        run_cfg = AttackConfig(**{**asdict(cfg), "seed": image_seed(cfg.seed, image_id)})
        res = cg_attack(oracle, flow, decoder, x, y, run_cfg, image_id=image_id)
        if res.queries_used != oracle.count:
            raise AssertionError(f"image {image_id}: reported {res.queries_used} queries, oracle counted {oracle.count}")
        totals.queries += oracle.count
        totals.infeasible += oracle.infeasible
        records.append(res.record(run_cfg))
    config = {**asdict(cfg), **(extra_config or {})}
    return summarize(records, config, skipped), totals


# ---------------------------------------------------------------- baselines and assumption check


def random_baseline_asr(model, images: np.ndarray, labels: np.ndarray, epsilon: float,
                        rng: np.random.Generator) -> float:
    """Percent of images misclassified under one uniform in-ball perturbation each."""
    images = np.asarray(images, dtype=np.float64)
    eta = project_ball(rng.uniform(-epsilon, epsilon, images.shape), epsilon, images)
    return 100.0 * float(np.mean(model.predict(images + eta) != labels))


def one_shot_asr(flow: CondFlow, decoder, model, images: np.ndarray, labels: np.ndarray,
                 epsilon: float, rng: np.random.Generator) -> float:
    """Percent of images misclassified by a single projected sample from the flow."""
    images = np.asarray(images, dtype=np.float64)
    lat = flow.sample(decoder.condition(images), rng, len(images)) if len(images) else None
    eta = project_ball(decoder.decode(lat), epsilon, images)
    return 100.0 * float(np.mean(model.predict(images + eta) != labels))


def symmetric_kl(flow_a: CondFlow, flow_b: CondFlow, conds: np.ndarray, n_samples: int,
                 rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo ``KL(a||b) + KL(b||a)`` averaged over conditions, with its standard error.

    Both flows use the standard-normal base so only the mapping layers are compared.
    """
    if tuple(flow_a.config.latent_shape) != tuple(flow_b.config.latent_shape):
        raise ValueError(f"latent shapes differ: {flow_a.config.latent_shape} vs {flow_b.config.latent_shape}")
    a, b = _standard_base(flow_a), _standard_base(flow_b)
    conds = np.asarray(conds, dtype=np.float64)
    terms = []
    for c in conds:
        rep = np.repeat(c[None], n_samples, axis=0)
        for p, q in ((a, b), (b, a)):
            eta = p.sample(rep, rng, n_samples)
            terms.append(p.log_prob(eta, rep) - q.log_prob(eta, rep))
    t = np.stack(terms).reshape(len(conds), 2, n_samples)
    per = t.sum(axis=1)  # paired draws: one sample from each direction
    est = float(per.mean())
    stderr = float(per.std(ddof=1) / math.sqrt(per.size)) if per.size > 1 else math.inf
    return est, stderr


def _standard_base(flow: CondFlow) -> CondFlow:
    out = flow.copy()
    out.set_base(np.zeros(flow.config.latent_shape), np.ones(flow.config.latent_shape))
    return out


def verify_assumption1(flow_a: CondFlow, flow_b: CondFlow, decoder, probe: Dataset,
                       target=None, epsilon: float | None = None, n_samples: int = 64,
                       seed: int = 0) -> dict:
    """Similarity of two flows' mapping layers plus, given a target, one-shot transfer ASR."""
    rng = np.random.default_rng(seed)
    kl, se = symmetric_kl(flow_a, flow_b, decoder.condition(probe.images), n_samples, rng)
    out = {"symmetric_kl": kl, "stderr": se, "probe_images": len(probe)}
    if target is not None:
        if epsilon is None:
            raise ValueError("epsilon is required for the transfer check")
        ok = target.predict(probe.images) == probe.labels
        x, y = probe.images[ok], probe.labels[ok]
        out["one_shot_asr"] = one_shot_asr(flow_a, decoder, target, x, y, epsilon, rng)
        out["random_asr"] = random_baseline_asr(target, x, y, epsilon, rng)
        out["evaluated_images"] = int(ok.sum())
    return out


# ---------------------------------------------------------------- desk-scale recipes


@dataclass
class DeskConfig:
    data: DataConfig = field(default_factory=DataConfig)
    n_test_per_class: int = 50
    surrogates: tuple[str, ...] = ("mlp-2", "cnn-wide", "cnn-deep")
    target: str = "cnn-small"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(seed=1))
    epsilon: float = 0.1
    r: float = 0.5
    lam: float = 200.0
    pixel_std: float = 1.0  # decoder scale: pixel std of a standard-normal latent, in units of epsilon
    kl: KLTrainConfig = field(default_factory=lambda: KLTrainConfig(steps=300, lr=5e-3))
    seed: int = 0

    def decoder(self) -> DctDecoder:
        h, w, c = self.data.H, self.data.W, self.data.C
        if h != w:
            raise ValueError("the DCT decoder needs square images")
        d_r = DctDecoder(h, self.r, c, 1.0).subspace.d_r
        return DctDecoder(h, self.r, c, self.pixel_std * 3.0 * default_scale(self.epsilon, h, d_r))


@dataclass
class Scenario:
    name: str
    surrogate_train: Dataset
    eval_set: Dataset  # images to attack, labelled in the target's class indexing
    surrogates: list[ClassifierModel]
    target: ClassifierModel
    decoder: DctDecoder
    flow: CondFlow
    info: dict = field(default_factory=dict)


def _train(ds: Dataset, arch: str, cfg: TrainConfig, test: Dataset | None, cache: Path | None,
           tag: str) -> ClassifierModel:
    path = cache / f"{tag}-{arch}.cadm" if cache else None
    if path is not None and path.exists():
        return io.load_classifier(path)
    model, rep = train_classifier(ds.images, ds.labels, arch, cfg, ds.num_classes,
                                  None if test is None else (test.images, test.labels))
    log.info("%s %s: train acc %.3f test acc %s", tag, arch, rep.train_accuracy, rep.test_accuracy)
    if path is not None:
        io.save_classifier(model, path)
    return model


def _pretrain(surrogates, ds: Dataset, desk: DeskConfig, cache: Path | None, tag: str) -> CondFlow:
    decoder = desk.decoder()
    path = cache / f"{tag}-flow.cadf" if cache else None
    if path is not None and path.exists():
        return io.load_flow(path)[0]
    spec = AdvLossSpec(desk.epsilon)
    fcfg = FlowConfig(decoder.latent_shape, decoder.cond_channels)
    res = pretrain_flow(surrogates, ds.images, ds.labels, decoder, desk.kl, spec, lam=desk.lam,
                        flow_config=fcfg, log_every=100)
    if path is not None:
        io.save_flow(res.flow, decoder, path)
        res.write_log(cache / f"{tag}-flow.ndjson")
    return res.flow


def build_scenario(name: str, desk: DeskConfig | None = None, cache_dir=None) -> Scenario:
    """Train (or load from ``cache_dir``) the models and flow of one scenario.

    closed-set: surrogates and target share the full training set.
    open-set-1: surrogates and target see disjoint halves of each class.
    open-set-2: surrogates and target see disjoint halves of the classes; the
    flow is pretrained only on the surrogates' classes and attacked images
    come from the target's classes.
    """
    if name not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}, got {name!r}")
    desk = desk or DeskConfig()
    cache = Path(cache_dir) if cache_dir else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    train, test = train_test(desk.data, desk.n_test_per_class)
    if name == "closed-set":
        sur_train, tgt_train, sur_test, tgt_test = train, train, test, test
    elif name == "open-set-1":
        split = split_openset(train, 1, desk.seed)
        sur_train, tgt_train, sur_test, tgt_test = split.surrogate_set, split.target_set, test, test
    else:
        split = split_openset(train, 2, desk.seed)
        sur_train = split.surrogate_set.relabel(split.surrogate_classes)
        tgt_train = split.target_set.relabel(split.target_classes)
        sur_test = test.relabel(split.surrogate_classes)
        tgt_test = test.relabel(split.target_classes)
    tag = name
    surrogates = [_train(sur_train, a, desk.train, sur_test, cache, tag + "-sur") for a in desk.surrogates]
    target = _train(tgt_train, desk.target, desk.train, tgt_test, cache, tag + "-tgt")
    flow = _pretrain(surrogates, sur_train, desk, cache, tag)
    info = {"target_test_accuracy": accuracy(target, tgt_test.images, tgt_test.labels),
            "surrogate_test_accuracy": [accuracy(m, sur_test.images, sur_test.labels) for m in surrogates]}
    return Scenario(name, sur_train, tgt_test, surrogates, target, desk.decoder(), flow, info)


# ---------------------------------------------------------------- config-driven runs


def run_experiment(config_path) -> ExperimentReport:
    """Run one campaign described by a JSON file.

    Keys: ``target`` (classifier checkpoint), ``flow`` (flow checkpoint),
    ``data`` (dataset file of images to attack), optional ``n_images``,
    ``scenario`` and ``attack`` (``AttackConfig`` fields). Every checkpoint
    is checked before the first attack.
    """
    path = Path(config_path)
    cfg = json.loads(path.read_text())
    base = path.parent
    files = {k: base / cfg[k] for k in ("target", "flow", "data")}
    missing = [f"{k}={p}" for k, p in files.items() if not p.exists()]
    if missing:
        raise FileNotFoundError("missing checkpoint(s): " + ", ".join(missing))
    target = io.load_classifier(files["target"])
    flow, decoder = io.load_flow(files["flow"])
    data = io.load_dataset(files["data"], split="test")
    attack_cfg = AttackConfig(**cfg.get("attack", {}))
    n = int(cfg.get("n_images", len(data)))
    report, totals = run_campaign(target, flow, decoder, data.images[:n], data.labels[:n], attack_cfg,
                                  extra_config={"scenario": cfg.get("scenario", "closed-set")})
    if totals.infeasible:
        raise AssertionError(f"{totals.infeasible} infeasible queries reached the oracle")
    return report
