"""Training loop, checkpoints, evaluation tables, baselines and gradient checks."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import nn_core as nn
from .datasets import SplitSpec, build_scenes, load_tracks, split, synth_generate
from .model import HMNet, ModelConfig, SceneBatch
from .motion import InsufficientLengthError
from .objectives import ConfigurationError, ade, fde, rmse_at
from .social import FieldConfig, PoolConfig

log = logging.getLogger(__name__)

CHECKPOINT_SECONDS = (1, 2, 3, 4, 5)


@dataclass
class RunConfig:
    variant: str = "V+A"
    mode: str = "unimodal"
    obs_len: int = 15
    pred_len: int = 25
    frequency: float = 10.0
    downsample: int = 2
    stride: int = 1
    # social field and pooling
    field_length: float = 60.0
    lane_width: float = 3.7
    lanes: int = 3
    grid_rows: int = 13
    conv1_channels: int = 64
    conv2_channels: int = 16
    use_social: bool = True
    # sizes
    embed: int = 16
    enc_hidden_s: int = 64
    enc_hidden_v: int = 32
    enc_hidden_a: int = 32
    dec_hidden_s: int = 64
    dec_hidden_v: int = 32
    dec_hidden_a: int = 32
    proj_dim: int = 16
    goal_dim: int = 16
    latent: int = 16
    cvae_hidden: int = 64
    pos_scale: float = 30.0
    vel_scale: float = 10.0
    acc_scale: float = 2.0
    # objective / optimizer
    k: int = 20
    val_k: int = 5
    lambda1: float = 1.0
    lambda2: float = 0.5
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    mse_epochs: int = 3
    clip_norm: float = 10.0
    train_samples: int = 1
    kl_warmup: int = 0  # epochs over which the KL weight ramps linearly to 1
    seed: int = 0
    eval_seed: int = 0
    # data
    split_train: float = 0.7
    split_val: float = 0.2
    split_test: float = 0.1
    split_seed: int = 0
    data_csv: str = ""
    synth_kind: str = "constant_velocity"
    synth_mix: str = ""
    synth_n: int = 500
    synth_noise: float = 0.1
    synth_seed: int = 0
    synth_multi_agent: bool = False
    synth_steps: int = 80
    synth_change_prob: float = 1.0
    synth_onset: str = ""  # "lo,hi" seconds
    synth_direction: int = 0
    synth_lanes: str = ""  # comma separated lane indices
    max_scenes: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.mode not in ("unimodal", "multimodal"):
            raise ConfigurationError(f"mode must be unimodal or multimodal, got {self.mode!r}")
        if self.downsample < 1:
            raise ConfigurationError("downsample must be >= 1")

    @property
    def sample_rate(self) -> float:
        """Frequency of the model's windows after downsampling."""
        return self.frequency / self.downsample

    def field_config(self) -> FieldConfig:
        return FieldConfig(self.field_length, self.lane_width, self.lanes, self.grid_rows, self.lanes)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, use_social=self.use_social, embed=self.embed,
            enc_hidden={"s": self.enc_hidden_s, "v": self.enc_hidden_v, "a": self.enc_hidden_a},
            dec_hidden={"s": self.dec_hidden_s, "v": self.dec_hidden_v, "a": self.dec_hidden_a},
            proj_dim=self.proj_dim, goal_dim=self.goal_dim, latent=self.latent,
            cvae_hidden=self.cvae_hidden, field_cfg=self.field_config(),
            pool=PoolConfig(self.conv1_channels, (3, 3), self.conv2_channels, (3, 1), (2, 1)),
            scales={"s": self.pos_scale, "v": self.vel_scale, "a": self.acc_scale},
            goal_scale=(self.pos_scale, self.lane_width),
        )

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, raw):
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    if name not in fields:
        raise ConfigurationError(f"unknown config key {name!r}")
    default = fields[name].default
    value = yaml.safe_load(raw) if isinstance(raw, str) else raw
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{name} expects true/false, got {raw!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, str):
            try:  # YAML 1.1 reads "3e-4" as a string
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{name} expects a number, got {raw!r}")
        if isinstance(default, int) and value != int(value):
            raise ConfigurationError(f"{name} expects an integer, got {raw!r}")
        return type(default)(value)
    return "" if value is None else str(value)


def load_config(path=None, overrides: list[str] | dict | None = None) -> RunConfig:
    """Read a flat ``key: value`` YAML file and apply ``key=value`` overrides."""
    values: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(yaml.safe_load(fh) or {})
    if isinstance(overrides, dict):
        values.update(overrides)
    else:
        for item in overrides or []:
            if "=" not in item:
                raise ConfigurationError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------- data


def load_data_tracks(cfg: RunConfig):
    if cfg.data_csv:
        tracks = load_tracks(cfg.data_csv, cfg.frequency)
    else:
        onset = tuple(float(v) for v in cfg.synth_onset.split(",")) if cfg.synth_onset else None
        lanes = tuple(int(v) for v in cfg.synth_lanes.split(",")) if cfg.synth_lanes else None
        mix = tuple(s.strip() for s in cfg.synth_mix.split(",")) if cfg.synth_mix else None
        tracks = synth_generate(
            cfg.synth_kind, cfg.synth_n, cfg.synth_noise, cfg.synth_seed,
            n_steps=cfg.synth_steps, frequency=cfg.frequency, lane_width=cfg.lane_width,
            n_lanes=cfg.lanes, multi_agent=cfg.synth_multi_agent, onset=onset,
            change_prob=cfg.synth_change_prob, direction=cfg.synth_direction or None,
            lanes=lanes, mix=mix)
    out = []
    for tr in tracks:
        tr = tr.downsample(cfg.downsample)
        if tr is not None:
            out.append(tr)
    return out


def load_scenes(cfg: RunConfig):
    scenes = build_scenes(load_data_tracks(cfg), cfg.obs_len, cfg.pred_len, cfg.field_config(),
                          cfg.stride)
    if cfg.max_scenes and len(scenes) > cfg.max_scenes:
        keep = np.sort(np.random.default_rng(cfg.split_seed).permutation(len(scenes))[: cfg.max_scenes])
        scenes = [scenes[i] for i in keep]
    return scenes


def split_scenes(cfg: RunConfig, scenes=None) -> dict[str, list]:
    scenes = load_scenes(cfg) if scenes is None else scenes
    spec = SplitSpec((cfg.split_train, cfg.split_val, cfg.split_test), cfg.split_seed)
    tr, va, te = split(scenes, spec)
    return {"train": tr, "val": va, "test": te}


def batches(items, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: RunConfig
    epoch: int
    history: list[dict] = field(default_factory=list)

    def model(self) -> HMNet:
        m = HMNet(self.config.model_config(), seed=self.config.seed)
        m.store.load_state_dict(self.params)
        return m

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"format": "hmnet-checkpoint/1", "config": self.config.to_dict(),
                "epoch": self.epoch, "history": self.history, "param_names": list(self.params)}
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            params = {k: z[f"param/{k}"].copy() for k in meta["param_names"]}
        return cls(params, RunConfig(**meta["config"]), meta["epoch"], meta["history"])

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def params_digest(model: HMNet) -> str:
    return Checkpoint(model.store.state_dict(), RunConfig(), 0).digest()


# ---------------------------------------------------------------- evaluation


@dataclass
class MetricTable:
    mode: str
    k: int
    rows: list[dict]  # time_s, step, ade, fde, rmse (None when beyond the horizon)
    n_scenes: int

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_s", "step", "ade", "fde", "rmse"])
        for r in self.rows:
            w.writerow([r["time_s"], r["step"]] + ["" if r[c] is None else repr(r[c])
                                                   for c in ("ade", "fde", "rmse")])
        text = buf.getvalue()
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_text(self) -> str:
        title = "unimodal" if self.mode == "unimodal" else f"multimodal best-of-{self.k}"
        lines = [f"{title} ({self.n_scenes} scenes)",
                 f"{'time':>6} {'step':>5} {'ADE(m)':>9} {'FDE(m)':>9} {'RMSE(m)':>9}"]
        for r in self.rows:
            vals = ["     --  " if r[c] is None else f"{r[c]:9.4f}" for c in ("ade", "fde", "rmse")]
            step = "--" if r["step"] is None else str(r["step"])
            lines.append(f"{r['time_s']:>5}s {step:>5} " + " ".join(vals))
        return "\n".join(lines)


def metric_table(preds: np.ndarray, gts: np.ndarray, sample_rate: float, mode: str,
                 k: int) -> MetricTable:
    """ADE/FDE/RMSE at 1..5 s from predictions ``(N, K, T, 2)`` and truths ``(N, T, 2)``.

    ADE at a checkpoint averages steps up to it; with K > 1 each metric
    takes the best sample per scene.
    """
    n, _, horizon, _ = preds.shape
    rows = []
    for t_s in CHECKPOINT_SECONDS:
        step = int(round(t_s * sample_rate))
        if step < 1 or step > horizon:
            rows.append({"time_s": t_s, "step": None, "ade": None, "fde": None, "rmse": None})
            continue
        g = gts[:, None, :step]
        p = preds[:, :, :step]
        ade_k = ade(p, np.broadcast_to(g, p.shape))  # (N, K)
        fde_k = fde(p, np.broadcast_to(g, p.shape))
        best = np.argmin(fde_k, axis=1)
        chosen = preds[np.arange(n), best]
        rows.append({
            "time_s": t_s, "step": step,
            "ade": float(np.mean(ade_k.min(axis=1))),
            "fde": float(np.mean(fde_k.min(axis=1))),
            "rmse": rmse_at(chosen, gts, step),
        })
    return MetricTable(mode, k, rows, n)


def predict_scenes(model: HMNet, scenes, mode: str, k: int, seed: int = 0,
                   chunk: int = 64) -> np.ndarray:
    out = []
    for i, part in enumerate(batches(list(scenes), chunk)):
        rng = np.random.default_rng([seed, i])
        out.append(model.predict(SceneBatch.collate(part), mode, k, rng))
    return np.concatenate(out, axis=0)


def _check_horizon(cfg: RunConfig, scenes) -> None:
    for sc in scenes:
        if len(sc.future) != cfg.pred_len or len(sc.history) != cfg.obs_len:
            raise ConfigurationError(
                f"scene {sc.scene_id} has {len(sc.history)}/{len(sc.future)} steps, checkpoint "
                f"expects {cfg.obs_len}/{cfg.pred_len}")
        if abs(sc.frequency - cfg.sample_rate) > 1e-9:
            raise ConfigurationError(f"scene sampled at {sc.frequency} Hz, checkpoint expects {cfg.sample_rate}")


def evaluate(checkpoint: Checkpoint, split_name: str = "test", mode: str | None = None,
             k: int | None = None, scenes=None) -> MetricTable:
    cfg = checkpoint.config
    mode = mode or cfg.mode
    k = 1 if mode == "unimodal" else (k or cfg.k)
    if scenes is None:
        scenes = split_scenes(cfg)[split_name]
    if not scenes:
        raise ConfigurationError(f"split {split_name!r} is empty")
    _check_horizon(cfg, scenes)
    model = checkpoint.model()
    preds = predict_scenes(model, scenes, mode, k, cfg.eval_seed)
    gts = np.stack([sc.future for sc in scenes])
    return metric_table(preds, gts, cfg.sample_rate, mode, k)


def evaluate_predictor(predict: Callable, scenes, sample_rate: float) -> MetricTable:
    """Table for any per-scene predictor returning a ``(T, 2)`` track."""
    preds = np.stack([predict(sc) for sc in scenes])[:, None]
    gts = np.stack([sc.future for sc in scenes])
    return metric_table(preds, gts, sample_rate, "unimodal", 1)


def baseline_constant_velocity(scene, steps: int | None = None) -> np.ndarray:
    """Extrapolate the last observed per-step displacement for ``steps`` steps."""
    hist = np.asarray(scene.history if hasattr(scene, "history") else scene, dtype=np.float64)
    if len(hist) < 2:
        raise InsufficientLengthError("constant-velocity baseline needs >= 2 observed steps")
    steps = steps if steps is not None else len(scene.future)
    step_disp = hist[-1] - hist[-2]
    return hist[-1] + step_disp * np.arange(1, steps + 1)[:, None]


# ---------------------------------------------------------------- training


def _validate(model: HMNet, cfg: RunConfig, scenes) -> float:
    if not scenes:
        return float("nan")
    k = 1 if cfg.mode == "unimodal" else cfg.val_k
    preds = predict_scenes(model, scenes, cfg.mode, k, cfg.eval_seed + 1)
    gts = np.stack([sc.future for sc in scenes])[:, None]
    return float(np.mean(ade(preds, np.broadcast_to(gts, preds.shape)).min(axis=1)))


def train(cfg: RunConfig, splits: dict | None = None, progress: Callable | None = None) -> Checkpoint:
    """Adam training; MSE for the first ``mse_epochs`` epochs then NLL.

    Multimodal runs may ramp the KL weight from 0 to 1 over ``kl_warmup``
    epochs.  Returns the checkpoint with the best validation ADE after
    warm-up.  A non-finite loss stops training and returns the best finite
    checkpoint so far.
    """
    splits = split_scenes(cfg) if splits is None else splits
    train_set, val_set = splits["train"], splits["val"]
    if not train_set:
        raise ConfigurationError("training split is empty")
    _check_horizon(cfg, train_set)
    model = HMNet(cfg.model_config(), seed=cfg.seed)
    opt = nn.Adam(model.store, lr=cfg.lr, clip_norm=cfg.clip_norm)
    history: list[dict] = []
    best = Checkpoint(model.store.state_dict(), cfg, 0, history)
    best_val = np.inf
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_kind = "mse" if epoch <= cfg.mse_epochs else "nll"
        kl_weight = min(1.0, (epoch - 1) / cfg.kl_warmup) if cfg.kl_warmup > 0 else 1.0
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        noise = np.random.default_rng([cfg.seed, epoch, 1])
        losses, kls, goals, sizes = [], [], [], []
        diverged = False
        for idx in batches(order, cfg.batch_size):
            batch = SceneBatch.collate([train_set[i] for i in idx])
            model.store.zero_grad()
            rep = model.loss(batch, cfg.mode, loss_kind, rng=noise,
                             lambdas=(cfg.lambda1, cfg.lambda2), samples=cfg.train_samples,
                             kl_weight=kl_weight)
            if not np.isfinite(rep.value):
                diverged = True
                break
            nn.reverse_gradients(rep.total)
            opt.step()
            losses.append(rep.value)
            sizes.append(len(idx))
            kls.append(rep.kl)
            goals.append(rep.l_goal)
        if diverged:
            log.warning("non-finite loss in epoch %d; keeping the last finite checkpoint", epoch)
            history.append({"epoch": epoch, "loss_kind": loss_kind, "train_loss": None,
                            "val_ade": None, "diverged": True})
            break
        val = _validate(model, cfg, val_set)
        # scene-weighted, so the short last batch does not add jitter
        rec = {"epoch": epoch, "loss_kind": loss_kind, "train_loss": float(np.average(losses, weights=sizes)),
               "val_ade": val, "seconds": round(time.perf_counter() - t0, 3)}
        if cfg.mode == "multimodal":
            rec.update(kl=float(np.average(kls, weights=sizes)),
                       goal_loss=float(np.average(goals, weights=sizes)))
        history.append(rec)
        if progress:
            progress(rec)
        # during KL warm-up the objective is not yet the final one
        eligible = epoch > cfg.kl_warmup or epoch == cfg.epochs or cfg.mode == "unimodal"
        if eligible and (not val_set or val < best_val):
            best_val = val if val_set else best_val
            best = Checkpoint(model.store.state_dict(), cfg, epoch, history)
    best.history = [{k: v for k, v in h.items() if k != "seconds"} for h in history]
    return best


# ---------------------------------------------------------------- ablation ladder


@dataclass
class AblationReport:
    """ADE/FDE at the checkpoints for each variant, one table row per variant."""

    tables: dict[str, list[MetricTable]]  # variant -> one table per seed
    seeds: tuple[int, ...]

    def mean(self, variant: str, key: str) -> list:
        cols = [t.column(key) for t in self.tables[variant]]
        return [None if any(c[i] is None for c in cols) else float(np.mean([c[i] for c in cols]))
                for i in range(len(CHECKPOINT_SECONDS))]

    def mean_ade(self, variant: str) -> float:
        """ADE over the full horizon, averaged over seeds."""
        return float(np.mean([[r["ade"] for r in t.rows if r["ade"] is not None][-1]
                              for t in self.tables[variant]]))

    def ordering_holds(self) -> bool:
        order = [v for v in ("S", "V", "V+A") if v in self.tables]
        vals = [self.mean_ade(v) for v in order]
        return all(b <= a for a, b in zip(vals, vals[1:]))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "metric"] + [f"{t}s" for t in CHECKPOINT_SECONDS] + ["seeds"])
        for v in self.tables:
            for key in ("ade", "fde"):
                w.writerow([v, key] + ["" if x is None else repr(x) for x in self.mean(v, key)]
                           + [len(self.seeds)])
        text = buf.getvalue()
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_text(self) -> str:
        head = f"{'variant':<8}" + "".join(f"{f'{t}s':>14}" for t in CHECKPOINT_SECONDS)
        lines = [f"ADE / FDE (m), mean over seeds {list(self.seeds)}", head]
        for v in self.tables:
            a, f = self.mean(v, "ade"), self.mean(v, "fde")
            cells = ["--" if x is None else f"{x:.2f}/{y:.2f}" for x, y in zip(a, f)]
            lines.append(f"{v:<8}" + "".join(f"{c:>14}" for c in cells))
        return "\n".join(lines)


def ablation_ladder(cfg: RunConfig, variants=("S", "V", "V+A"), seeds=(0, 1, 2),
                    progress: Callable | None = None) -> AblationReport:
    """Train and evaluate each variant under each seed on one fixed split.

    Only ``variant`` and ``seed`` change between runs.
    """
    splits = split_scenes(cfg)
    tables: dict[str, list[MetricTable]] = {}
    for v in variants:
        for s in seeds:
            run = cfg.replace(variant=v, seed=s)
            ck = train(run, splits)
            tab = evaluate(ck, "test", "unimodal", scenes=splits["test"])
            tables.setdefault(v, []).append(tab)
            if progress:
                progress(v, s, tab)
    return AblationReport(tables, tuple(seeds))


# ---------------------------------------------------------------- gradient check


def gradcheck_config() -> RunConfig:
    return RunConfig(
        variant="V+A", mode="multimodal", obs_len=6, pred_len=4, embed=4,
        enc_hidden_s=6, enc_hidden_v=5, enc_hidden_a=4, dec_hidden_s=6, dec_hidden_v=5,
        dec_hidden_a=4, proj_dim=3, goal_dim=3, latent=2, cvae_hidden=5, conv1_channels=4,
        conv2_channels=3, k=2, train_samples=2, seed=1)


def gradcheck_scenes(cfg: RunConfig, n: int = 3):
    tracks = synth_generate("lane_change", 12, 0.1, seed=3, multi_agent=True,
                            n_steps=2 * (cfg.obs_len + cfg.pred_len), frequency=cfg.frequency)
    tracks = [t.downsample(cfg.downsample) for t in tracks]
    scenes = build_scenes(tracks, cfg.obs_len, cfg.pred_len, cfg.field_config())
    with_nb = [s for s in scenes if s.neighbors]
    return (with_nb + [s for s in scenes if not s.neighbors])[:n]


def gradcheck(cfg: RunConfig | None = None, step: float = 1e-5, loss_kind: str = "nll",
              floor: float = 1e-5, max_entries: int | None = None) -> dict:
    """Compare reverse-mode gradients with central differences for every parameter group.

    ``floor`` bounds the relative-error denominator from below so that
    gradients near zero are judged against finite-difference round-off.
    """
    cfg = cfg or gradcheck_config()
    model = HMNet(cfg.model_config(), seed=cfg.seed)
    batch = SceneBatch.collate(gradcheck_scenes(cfg))

    samples = cfg.k if cfg.mode == "multimodal" else 1

    def run():
        # frozen latent noise: same seed on every evaluation
        return model.loss(batch, cfg.mode, loss_kind, rng=np.random.default_rng(cfg.seed + 7),
                          lambdas=(cfg.lambda1, cfg.lambda2), samples=samples)

    def value() -> float:
        with nn.no_grad():
            return run().value

    t0 = time.perf_counter()
    model.store.zero_grad()
    nn.reverse_gradients(run().total)
    groups = {}
    pick = np.random.default_rng(0)
    for name, p in model.store.items():
        analytic = p.grad.copy()
        idxs = list(np.ndindex(p.shape))
        if max_entries is not None and len(idxs) > max_entries:
            idxs = [idxs[i] for i in sorted(pick.choice(len(idxs), max_entries, replace=False))]
        worst = 0.0
        for idx in idxs:
            num = nn.finite_difference(value, p, idx, step)
            worst = max(worst, nn.relative_error(float(analytic[idx]), num, floor))
        groups[name] = {"entries": len(idxs), "max_rel_error": worst}
    overall = max(g["max_rel_error"] for g in groups.values())
    return {"groups": groups, "max_rel_error": overall, "seconds": time.perf_counter() - t0,
            "n_params": model.store.num_params(), "loss": value()}
