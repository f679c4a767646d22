"""Experiment driver: seeded streams, datasets, the epoch loop, metrics rows
and checkpoint round-trips."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_io
from .config import RunConfig
from .model import CLASSIFY, REGRESS, CbmModel
from .optim import Adam, LrSchedule
from .scheme import StateStore, train_epoch
from .tasks import (
    SequenceSet,
    evaluate_classification,
    evaluate_distance,
    gen_catdog,
    gen_moving_shapes,
)

log = logging.getLogger(__name__)

STREAMS = ("data", "gates", "init", "sampler")

METRICS_HEADER = (
    "epoch", "task_loss", "coherence_loss", "grad_norm", "lr", "td_rate", "waves",
    "max_tape_depth", "accuracy", "exact_match", "exact_match_after_cat", "mae",
)
TIMING_HEADER = ("epoch", "seconds")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent counter-based generators per component, all derived from
    one seed.  Runs that share a seed share data even if other settings
    differ."""
    return {
        name: np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(k,))))
        for k, name in enumerate(STREAMS)
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": [int(x) for x in obj.ravel()], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def build_datasets(cfg: RunConfig, rng: np.random.Generator) -> tuple[SequenceSet, SequenceSet]:
    if cfg.task == "moving-shapes":
        def gen(n):
            return SequenceSet.from_shapes(
                gen_moving_shapes(n, cfg.seq_len, cfg.height, cfg.speed, rng, noise=cfg.noise))
    else:
        def gen(n):
            return SequenceSet.from_catdog(
                gen_catdog(n, cfg.seq_len, cfg.max_gap, rng, cfg.height, cfg.width, cfg.noise))
    return gen(cfg.train_size), gen(cfg.test_size)


def build_model(cfg: RunConfig, rng: np.random.Generator) -> CbmModel:
    kind = CLASSIFY if cfg.task == "moving-shapes" else REGRESS
    return CbmModel(cfg.stack_config(), cfg.image_shape(), kind, num_classes=4, rng=rng,
                    target_scale=cfg.target_scale if kind == REGRESS else 1.0, pool=cfg.pool)


def evaluate(cfg: RunConfig, model: CbmModel, dataset: SequenceSet) -> dict:
    if cfg.task == "moving-shapes":
        return evaluate_classification(model, dataset).as_dict()
    return evaluate_distance(model, dataset).as_dict()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class Trainer:
    """Everything that evolves during training, so that it can be saved and
    restored between epochs."""

    cfg: RunConfig
    train_set: SequenceSet
    test_set: SequenceSet
    model: CbmModel
    optimizer: Adam
    schedule: LrSchedule
    streams: dict[str, np.random.Generator]
    store: StateStore = field(default_factory=StateStore)
    epoch: int = 0

    @classmethod
    def fresh(cls, cfg: RunConfig) -> "Trainer":
        streams = make_streams(cfg.seed)
        train_set, test_set = build_datasets(cfg, streams["data"])
        model = build_model(cfg, streams["init"])
        opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        sched = LrSchedule(cfg.lr, cfg.lr_factor, cfg.lr_patience)
        return cls(cfg, train_set, test_set, model, opt, sched, streams)

    def run_epoch(self) -> tuple[dict, float]:
        """Train one epoch; returns the metrics row and wall-clock seconds."""
        cfg = self.cfg
        em = train_epoch(self.model, self.train_set, cfg.coherence_config(), self.optimizer,
                         cfg.td(), self.epoch, self.streams, self.store,
                         batch_size=cfg.batch_size, lr=self.schedule.rate)
        row = {
            "epoch": self.epoch, "task_loss": em.task_loss, "coherence_loss": em.coherence_loss,
            "grad_norm": em.grad_norm, "lr": em.lr, "td_rate": em.td_rate, "waves": em.waves,
            "max_tape_depth": em.max_tape_depth,
        }
        last = self.epoch + 1 == cfg.epochs
        if last or (cfg.eval_every and (self.epoch + 1) % cfg.eval_every == 0):
            row.update(evaluate(cfg, self.model, self.test_set))
        self.schedule.step(em.task_loss)
        self.epoch += 1
        return row, em.seconds

    # -- checkpointing -------------------------------------------------------

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        tensors = {}
        names = list(self.model.named_parameters())
        for name, p, m, v in zip(names, self.optimizer.params, self.optimizer.state.m,
                                 self.optimizer.state.v):
            tensors[f"param/{name}"] = p.data
            tensors[f"adam_m/{name}"] = m
            tensors[f"adam_v/{name}"] = v
        for (seq, layer, t), value in self.store.items():
            tensors[f"store/{seq}/{layer}/{t}"] = value
        sched = self.schedule
        state = {
            "adam_step": self.optimizer.state.step,
            "lr_schedule": {"rate": sched.rate, "best": sched.best if math.isfinite(sched.best) else None,
                            "stale": sched.stale},
            "streams": {k: _jsonable(g.bit_generator.state) for k, g in self.streams.items()},
        }
        return ckpt_io.Checkpoint(self.epoch, config_io.dump(self.cfg), state, tensors)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "Trainer":
        cfg = config_io.loads(ck.config_text, source="<checkpoint config>")
        tr = cls.fresh(cfg)
        params = ck.group("param")
        tr.model.load_state_dict(params)
        names = list(tr.model.named_parameters())
        m, v = ck.group("adam_m"), ck.group("adam_v")
        for i, name in enumerate(names):
            tr.optimizer.state.m[i][...] = m[name]
            tr.optimizer.state.v[i][...] = v[name]
        tr.optimizer.state.step = int(ck.state["adam_step"])
        ls = ck.state["lr_schedule"]
        tr.schedule.rate = float(ls["rate"])
        tr.schedule.best = math.inf if ls["best"] is None else float(ls["best"])
        tr.schedule.stale = int(ls["stale"])
        for k, st in ck.state["streams"].items():
            tr.streams[k].bit_generator.state = _from_jsonable(st)
        for key, value in ck.group("store").items():
            seq, layer, t = (int(x) for x in key.split("/"))
            tr.store.put(seq, layer, t, value)
        tr.epoch = ck.epoch
        return tr


def metrics_line(row: dict) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_fmt(row.get(k)) for k in METRICS_HEADER])
    return buf.getvalue()


def _append(path: Path, header, line: str) -> None:
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        if new:
            fh.write(",".join(header) + "\n")
        fh.write(line)


def run_training(cfg: RunConfig, out_dir, resume: str | Path | None = None,
                 keep_checkpoints: bool = True) -> list[dict]:
    """Train for ``cfg.epochs`` epochs, appending to ``metrics.csv`` and
    writing ``checkpoint_epoch<k>.bin`` after every epoch.  Wall-clock times
    go to ``timing.csv`` so that ``metrics.csv`` is reproducible byte for
    byte."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = Trainer.from_checkpoint(ckpt_io.load(resume))
        trainer.cfg = trainer.cfg.replace(epochs=cfg.epochs)
    else:
        trainer = Trainer.fresh(cfg)
        for name in ("metrics.csv", "timing.csv"):
            (out / name).unlink(missing_ok=True)
    (out / "config.ini").write_text(config_io.dump(trainer.cfg), encoding="utf-8")
    rows = []
    while trainer.epoch < trainer.cfg.epochs:
        row, seconds = trainer.run_epoch()
        rows.append(row)
        _append(out / "metrics.csv", METRICS_HEADER, metrics_line(row))
        _append(out / "timing.csv", TIMING_HEADER, f"{row['epoch']},{seconds!r}\n")
        path = out / f"checkpoint_epoch{trainer.epoch}.bin"
        ckpt_io.save(path, trainer.to_checkpoint())
        if not keep_checkpoints:
            (out / f"checkpoint_epoch{trainer.epoch - 1}.bin").unlink(missing_ok=True)
        log.info("epoch %d %s", row["epoch"],
                 " ".join(f"{k}={row[k]:.4g}" for k in METRICS_HEADER[1:] if isinstance(row.get(k), float)))
    return rows


def load_model(path) -> tuple[RunConfig, CbmModel, Trainer]:
    trainer = Trainer.from_checkpoint(ckpt_io.load(path))
    return trainer.cfg, trainer.model, trainer
