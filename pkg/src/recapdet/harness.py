"""Training, scenario evaluation and the ablation sweep."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import checkpoint as ckpt_io
from .config import ARCH_KEYS, RunConfig
from .errors import ConfigError, CorpusIOError, RecapError, TrainingDivergenceError
from .filterbank import decompose, resize_bilinear, to_grayscale
from .metrics import EvalReport, auc, reports_to_csv
from .model import VARIANTS, RecaptureNet
from .nn import load_state_dict, state_dict
from .optim import AdamState, adam_step
from .synth import LOSSLESS, CorpusConfig, LabeledSample, load_corpus, make_splits
from .tensor import Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)

# scenario -> (device profile, lossless?)
SCENARIOS = {
    "intra": (0, True),
    "cross-dataset": (1, True),
    "cross-quality": (0, False),
    "cross-dataset+quality": (1, False),
}
# Table captions the cross-domain scenarios reproduce.
SCENARIO_TABLES = {
    "cross-dataset": "Cross-dataset evaluation.",
    "cross-quality": "Cross-quality (JPEG compression) evaluation.",
    "cross-dataset+quality": "Cross-dataset and cross-quality evaluation.",
}


@dataclass
class Corpus:
    config: CorpusConfig
    samples: list[LabeledSample]

    @classmethod
    def load(cls, root: Union[str, Path]) -> "Corpus":
        cfg, samples = load_corpus(root)
        return cls(cfg, samples)

    def select(self, split: str, device: int, lossless: bool) -> list[LabeledSample]:
        return [
            s for s in self.samples
            if s.split == split and s.device_profile == device and (s.quality == LOSSLESS) == lossless
        ]

    def train_eval_templates(self) -> tuple[set[int], set[int]]:
        tr = {s.template_id for s in self.samples if s.split == "train"}
        ev = {s.template_id for s in self.samples if s.split in ("val", "test")}
        return tr, ev


@dataclass
class Arrays:
    band: np.ndarray  # (N, 3, n, n)
    rgb: np.ndarray   # (N, 3, n, n), values in [0, 1]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def prepare_arrays(samples: Sequence[LabeledSample], n: int, k: int, dtype: str = "float32") -> Arrays:
    """Band images and resized RGB for a list of samples."""
    if not samples:
        raise ConfigError("no samples selected")
    gray = np.stack([to_grayscale(s.image, n) for s in samples])
    band = decompose(gray, k)
    rgb = np.stack([resize_bilinear(s.image.astype(np.float64) / 255.0, n, n).transpose(2, 0, 1)
                    for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Arrays(band.astype(dtype), rgb.astype(dtype), labels)


def predict(model: RecaptureNet, data: Arrays, batch_size: int = 32) -> np.ndarray:
    """Probability of the recaptured class for every sample (eval mode)."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            logits = model(Tensor(data.band[i:i + batch_size]), Tensor(data.rgb[i:i + batch_size])).data
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            out.append((p[:, 1] / p.sum(axis=1)).astype(np.float64))
    model.train(was_training)
    return np.concatenate(out)


@dataclass
class TrainResult:
    model: RecaptureNet
    history: list[dict] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    seconds: float = 0.0
    checkpoint_path: Optional[str] = None


def _emit(path: Optional[Path], record: dict) -> None:
    log.info(json.dumps(record))
    if path is not None:
        with path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def _log_loss(p: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return float(-np.mean(np.where(labels == 1, np.log(p), np.log(1 - p))))


def train(cfg: RunConfig, corpus: Optional[Corpus] = None, save: bool = True,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Adam + cross-entropy on the train split; keeps the best validation-AUC weights."""
    t0 = time.perf_counter()
    corpus = corpus or Corpus.load(cfg.paths.corpus)
    tr_t, ev_t = corpus.train_eval_templates()
    make_splits(corpus.samples, tr_t, ev_t)  # raises on template overlap

    train_samples = corpus.select("train", 0, True)
    val_samples = corpus.select("val", 0, True)
    if not train_samples:
        raise CorpusIOError("corpus has no lossless device-0 training samples")
    n = cfg.input_side
    tr = prepare_arrays(train_samples, n, cfg.k, cfg.dtype)
    va = prepare_arrays(val_samples, n, cfg.k, cfg.dtype) if val_samples else None

    model = RecaptureNet(cfg.model_config(), cfg.seed)
    params = model.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    log_path = Path(cfg.paths.log) if save else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    result = TrainResult(model=model)
    best_state = None
    best_score = None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(tr))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples in train mode
            logits = model(Tensor(tr.band[idx]), Tensor(tr.rgb[idx]))
            loss = cross_entropy(logits, tr.labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergenceError(epoch)
            model.zero_grad()
            loss.backward()
            adam_step(params, state)
            losses.append(value)
        result.batch_losses += losses

        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if va is not None and len(set(va.labels.tolist())) == 2:
            p = predict(model, va)
            rec["val_auc"] = auc(p, va.labels)
            rec["val_loss"] = _log_loss(p, va.labels)
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        result.history.append(rec)
        _emit(log_path, rec)
        if on_epoch is not None:
            on_epoch(rec)

        # highest validation AUC; ties (common once AUC saturates) go to the lower loss
        if "val_auc" in rec:
            score = (rec["val_auc"], -rec["val_loss"])
        else:
            score = (-np.inf, -rec["train_loss"])
        if best_state is None or score > best_score:
            best_score = score
            result.best_val_auc = rec.get("val_auc", float("nan"))
            result.best_epoch = epoch
            best_state = {k: v.copy() for k, v in state_dict(model).items()}

    if best_state is not None:
        load_state_dict(model, best_state)
    model.eval()
    result.seconds = time.perf_counter() - t0
    if save:
        save_model(cfg.paths.checkpoint, model, cfg)
        result.checkpoint_path = cfg.paths.checkpoint
    return result


def save_model(path: Union[str, Path], model: RecaptureNet, cfg: RunConfig) -> None:
    ckpt_io.save(path, ckpt_io.Checkpoint(config=cfg.to_dict(), tensors=state_dict(model)))


def load_model(path: Union[str, Path], requested: Optional[RunConfig] = None) -> tuple[RecaptureNet, RunConfig]:
    """Rebuild a model from a checkpoint.

    With ``requested``, every architecture key must agree with the stored config.
    """
    ck = ckpt_io.load(path)
    if ckpt_io.config_hash(ck.config) != ck.config_hash:
        raise ConfigError(f"checkpoint {path}: stored config hash does not match its config")
    cfg = RunConfig.from_dict(ck.config)
    if requested is not None:
        mine, theirs = requested.arch(), cfg.arch()
        diff = [key for key in ARCH_KEYS if mine[key] != theirs[key]]
        if diff:
            raise ConfigError(f"checkpoint {path} (config {ck.config_hash[:12]}) conflicts on {diff}")
    model = RecaptureNet(cfg.model_config(), cfg.seed)
    load_state_dict(model, ck.tensors)
    model.eval()
    return model, cfg


def scenario_samples(corpus: Corpus, scenario: str, split: str = "test") -> list[LabeledSample]:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {list(SCENARIOS)}")
    device, lossless = SCENARIOS[scenario]
    chosen = corpus.select(split, device, lossless)
    if not chosen:
        raise ConfigError(f"corpus has no samples for scenario {scenario!r} (split {split})")
    return chosen


def evaluate_model(model: RecaptureNet, cfg: RunConfig, corpus: Corpus, scenario: str,
                   split: str = "test") -> EvalReport:
    data = prepare_arrays(scenario_samples(corpus, scenario, split), cfg.input_side, cfg.k, cfg.dtype)
    scores = predict(model, data)
    meta = {"config_hash": cfg.hash(), "variant": cfg.variant, "split": split, "n": len(data)}
    return EvalReport.from_scores(scenario, scores, data.labels, cfg.hter_threshold, meta)


def evaluate(checkpoint: Union[str, Path], scenario: str, corpus: Optional[Corpus] = None,
             requested: Optional[RunConfig] = None) -> EvalReport:
    model, cfg = load_model(checkpoint, requested)
    corpus = corpus or Corpus.load(cfg.paths.corpus)
    return evaluate_model(model, cfg, corpus, scenario)


def write_reports(out_dir: Union[str, Path], reports: Sequence[EvalReport], first_column: str = "Scenario",
                  names: Optional[Sequence[str]] = None, csv_name: str = "summary.csv") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(names) if names is not None else [r.scenario for r in reports]
    for name, rep in zip(names, reports):
        safe = name.replace("(", "_").replace(")", "")
        (out / f"{safe}.json").write_text(rep.to_json())
    csv_path = out / csv_name
    csv_path.write_text(reports_to_csv(list(zip(names, reports)), first_column))
    return csv_path


@dataclass
class AblationResult:
    # variant -> scenario -> report
    reports: dict[str, dict[str, EvalReport]] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    param_counts: dict[str, int] = field(default_factory=dict)

    def table(self, scenario: str) -> str:
        rows = [(v, self.reports[v][scenario]) for v in VARIANTS if scenario in self.reports.get(v, {})]
        return reports_to_csv(rows, "Model")


def ablate(cfg: RunConfig, corpus: Optional[Corpus] = None,
           scenarios: Sequence[str] = ("cross-dataset", "cross-quality", "cross-dataset+quality"),
           variants: Sequence[str] = VARIANTS, out_dir: Optional[Union[str, Path]] = None) -> AblationResult:
    """Train and evaluate each variant; a failing variant is recorded, not fatal."""
    corpus = corpus or Corpus.load(cfg.paths.corpus)
    res = AblationResult()
    for variant in VARIANTS:
        if variant not in variants:
            continue
        vcfg = cfg.with_variant(variant)
        if out_dir is not None:
            tag = variant.replace("(", "_").replace(")", "")
            vcfg = replace(vcfg, paths=replace(vcfg.paths, checkpoint=str(Path(out_dir) / f"{tag}.ckpt"),
                                               log=str(Path(out_dir) / f"{tag}.jsonl")))
        try:
            tr = train(vcfg, corpus, save=out_dir is not None)
            res.param_counts[variant] = tr.model.num_parameters()
            res.reports[variant] = {sc: evaluate_model(tr.model, vcfg, corpus, sc) for sc in scenarios}
        except RecapError as exc:
            log.error("variant %s failed: %s", variant, exc)
            res.errors[variant] = f"{type(exc).__name__}: {exc}"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for sc in scenarios:
            (out / f"ablation.{sc}.csv").write_text(res.table(sc))
        (out / "ablation.json").write_text(json.dumps({
            "config_hash": cfg.hash(),
            "config": cfg.to_dict(),
            "param_counts": res.param_counts,
            "errors": res.errors,
            "reports": {v: {sc: r.to_dict() for sc, r in d.items()} for v, d in res.reports.items()},
        }, indent=1))
    return res
