"""Losses and the two-phase training procedure.

Phase 1 pretrains at the fixed global scale (s = p, v = (0.5, 0.5)): standard
non-saturating GAN training with lazy R1 regularization on the discriminator,
with the generator's scale branch frozen at zero. Phase 2 initializes both
networks from the phase-1 checkpoint, freezes a copy of the generator as the
teacher, and continues on mixed global/patch batches: the discriminator sees
real and synthetic patches at matched (s, v) statistics, and the generator
additionally minimizes a teacher term that warps each synthetic patch back
into the base frame and compares it to the teacher's global view for the same
latent.

Every random draw is a pure function of (seed, phase, step), so training is
deterministic and interrupted runs resume on the exact trajectory.
"""

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import seeding
from .datapipe import (Manifest, PatchSampler, SamplingPolicy, dataset_stats,
                       sample_fake_spec)
from .geometry import PatchSpec, global_spec
from .netcore import (Discriminator, Generator, ModelConfig,
                      batch_synthesizer, clone_frozen, draw_latents,
                      load_checkpoint, save_checkpoint)
from .resample import warp_to_base

METRIC_COLUMNS = ("step", "loss_d", "loss_g", "r1", "teacher",
                  "proxy_pfid", "wallclock")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Flat run configuration; JSON round-trips, unknown keys are rejected."""

    p: int = 64
    s_lo: int | None = None
    s_hi: int | None = None
    lambda_r1: float = 1.0
    lambda_teacher: float = 5.0
    global_prob: float = 0.5
    batch_size: int = 8
    lr_g: float = 2.5e-3
    lr_d: float = 2.5e-3
    beta1: float = 0.0
    beta2: float = 0.99
    steps_phase1: int = 2000
    steps_phase2: int = 2000
    seed: int = 0
    w_l1: float = 1.0
    w_perc: float = 1.0
    r1_interval: int = 4
    d_z: int = 64
    d_w: int = 64
    fourier_channels: int = 64
    fourier_sigma: float | None = None
    fourier_cap: float | None = None
    synth_layers: int = 6
    synth_channels: int = 128
    kernel_size: int = 1
    disc_channels: int = 32
    s_max_norm: int | None = None
    log_every: int = 25
    snapshot_every: int = 0
    eval_every: int = 0
    proxy_pfid_n: int = 192

    def __post_init__(self):
        if self.lambda_teacher < 0:
            raise ConfigError("lambda_teacher must be >= 0")
        if not 0.0 <= self.global_prob <= 1.0:
            raise ConfigError("global_prob must be in [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.batch_size < 1 or self.r1_interval < 1:
            raise ConfigError("batch_size and r1_interval must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def model_config(cfg: TrainConfig, manifest: Manifest) -> ModelConfig:
    """Resolve the architecture config; s_max defaults to the largest HR size."""
    if cfg.s_max_norm is not None:
        s_max = cfg.s_max_norm
    else:
        hr_sizes = [r.s_im for r in manifest.hr_records]
        s_max = max(hr_sizes) if hr_sizes else 2 * cfg.p
    if s_max <= cfg.p:
        raise ConfigError(f"resolved s_max={s_max} must exceed p={cfg.p}")
    return ModelConfig(
        p=cfg.p, s_max=int(s_max), d_z=cfg.d_z, d_w=cfg.d_w,
        fourier_channels=cfg.fourier_channels, fourier_sigma=cfg.fourier_sigma,
        fourier_cap=cfg.fourier_cap, synth_layers=cfg.synth_layers,
        synth_channels=cfg.synth_channels, kernel_size=cfg.kernel_size,
        disc_channels=cfg.disc_channels)


def sampling_policy(cfg: TrainConfig) -> SamplingPolicy:
    return SamplingPolicy(p=cfg.p, s_lo=cfg.s_lo, s_hi=cfg.s_hi,
                          global_prob=cfg.global_prob)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def nonsat_losses(real_logit: torch.Tensor, fake_logit: torch.Tensor):
    """Non-saturating logistic pair: loss_D = softplus(-real) + softplus(fake),
    loss_G = softplus(-fake); batch means."""
    loss_d = F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()
    loss_g = F.softplus(-fake_logit).mean()
    return loss_d, loss_g


def r1_penalty(disc: nn.Module, real_img: torch.Tensor) -> torch.Tensor:
    """Mean squared gradient norm of D at real inputs; differentiable in D."""
    x = real_img.detach().requires_grad_(True)
    logits = disc(x)
    grads, = torch.autograd.grad(logits.sum(), x, create_graph=True)
    return grads.pow(2).sum(dim=tuple(range(1, grads.ndim))).mean()


class RandomConvPerceptual(nn.Module):
    """Fixed, seeded random-convolution feature distance.

    Stands in for a pretrained perceptual metric at desk scale; any module
    exposing distance(a, b) over (b, 3, p, p) tensors can be dropped in.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seeding.stream_int(seed, "perceptual"))
        self.stack = nn.Sequential(
            nn.Conv2d(3, 16, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 3, 2, 1))
        for mod in self.stack:
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, a=0.2,
                                        nonlinearity="leaky_relu")
                nn.init.zeros_(mod.bias)
        for p in self.parameters():
            p.requires_grad_(False)

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return (self.stack(a) - self.stack(b)).abs().mean()


def teacher_loss(patch: torch.Tensor, spec: PatchSpec,
                 teacher_base: torch.Tensor, w_l1: float = 1.0,
                 w_perc: float = 0.0, perceptual: nn.Module | None = None
                 ) -> torch.Tensor:
    """Distance between the warped patch and the teacher's base image over the
    covered region: masked mean-abs plus an optional perceptual term.

    Zero when the warped patch equals the teacher region; zero by definition
    when the mask covers no pixels.
    """
    warped, mask = warp_to_base(patch, spec)
    covered = mask.sum()
    if float(covered) == 0.0:
        return patch.new_zeros(())
    masked_teacher = teacher_base * mask
    loss = patch.new_zeros(())
    if w_l1:
        loss = loss + w_l1 * (warped - masked_teacher).abs().sum() / (3.0 * covered)
    if w_perc and perceptual is not None:
        loss = loss + w_perc * perceptual.distance(
            warped.unsqueeze(0), masked_teacher.unsqueeze(0))
    return loss


# ---------------------------------------------------------------------------
# Training state and steps
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    model_cfg: ModelConfig
    phase: int
    step: int
    gen: Generator
    disc: Discriminator
    teacher: Generator | None
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    perceptual: RandomConvPerceptual
    manifest: Manifest
    policy: SamplingPolicy
    sampler: PatchSampler
    stats: dict = field(default_factory=dict)


def _make_optimizers(cfg: TrainConfig, gen: Generator, disc: Discriminator,
                     phase: int):
    gen_params = gen.main_parameters() if phase == 1 else list(gen.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.lr_g, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d,
                             betas=(cfg.beta1, cfg.beta2))
    return opt_g, opt_d


def _set_phase_grads(gen: Generator, phase: int):
    frozen = set(gen.scale_branch_parameter_names()) if phase == 1 else set()
    for name, p in gen.named_parameters():
        p.requires_grad_(name not in frozen)


def _train_stats(cfg: TrainConfig, manifest: Manifest,
                 policy: SamplingPolicy) -> dict:
    ds = dataset_stats(manifest, policy, n_draws=4096, seed=cfg.seed)
    eligible = manifest.hr_sizes(policy)
    s_max_train = max((min(s, policy.effective_s_hi(s)) for s in eligible),
                      default=cfg.p)
    return {"e_s": ds["e_s"], "s_max_train": int(s_max_train)}


def build_phase1_state(cfg: TrainConfig, manifest: Manifest) -> TrainState:
    mc = model_config(cfg, manifest)
    gen = Generator(mc, seed=seeding.stream_int(cfg.seed, "init", "gen"))
    disc = Discriminator(mc, seed=seeding.stream_int(cfg.seed, "init", "disc"))
    _set_phase_grads(gen, 1)
    opt_g, opt_d = _make_optimizers(cfg, gen, disc, 1)
    policy = sampling_policy(cfg)
    sampler = PatchSampler(manifest, policy,
                           seed=seeding.stream_int(cfg.seed, "data", 1))
    return TrainState(cfg=cfg, model_cfg=mc, phase=1, step=0, gen=gen,
                      disc=disc, teacher=None, opt_g=opt_g, opt_d=opt_d,
                      perceptual=RandomConvPerceptual(cfg.seed),
                      manifest=manifest, policy=policy, sampler=sampler,
                      stats=_train_stats(cfg, manifest, sampling_policy(cfg)))


def build_phase2_state(cfg: TrainConfig, manifest: Manifest,
                       init_checkpoint) -> TrainState:
    """Initialize G and D from the phase-1 checkpoint and freeze the teacher."""
    bundle = load_checkpoint(init_checkpoint)
    gen, disc = bundle.gen, bundle.disc
    if gen.cfg != model_config(cfg, manifest):
        raise ConfigError("phase-1 checkpoint architecture does not match "
                          "the requested configuration")
    _set_phase_grads(gen, 2)
    teacher = clone_frozen(gen)
    opt_g, opt_d = _make_optimizers(cfg, gen, disc, 2)
    policy = sampling_policy(cfg)
    sampler = PatchSampler(manifest, policy,
                           seed=seeding.stream_int(cfg.seed, "data", 2))
    return TrainState(cfg=cfg, model_cfg=gen.cfg, phase=2, step=0, gen=gen,
                      disc=disc, teacher=teacher, opt_g=opt_g, opt_d=opt_d,
                      perceptual=RandomConvPerceptual(cfg.seed),
                      manifest=manifest, policy=policy, sampler=sampler,
                      stats=_train_stats(cfg, manifest, sampling_policy(cfg)))


def params_digest(module: nn.Module) -> str:
    """Order-stable content hash of all parameters and buffers."""
    h = hashlib.sha256()
    for key, val in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(val.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _check_finite(state: TrainState, values: dict):
    bad = [k for k, v in values.items() if not np.isfinite(v)]
    if bad:
        raise TrainingDiverged(
            f"non-finite loss at phase {state.phase} step {state.step}: "
            + ", ".join(f"{k}={values[k]}" for k in bad))


def _step_rng(state: TrainState, tag: str) -> np.random.Generator:
    return seeding.substream(state.cfg.seed, "step", state.phase, state.step, tag)


def _d_update(state: TrainState, real: torch.Tensor, fake: torch.Tensor) -> dict:
    cfg = state.cfg
    real_logit = state.disc(real)
    fake_logit = state.disc(fake)
    loss_d, _ = nonsat_losses(real_logit, fake_logit)
    r1_val = float("nan")
    if cfg.lambda_r1 > 0 and state.step % cfg.r1_interval == 0:
        r1 = r1_penalty(state.disc, real)
        loss_d = loss_d + (cfg.lambda_r1 / 2.0) * r1 * cfg.r1_interval
        r1_val = float(r1.detach())
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()
    return {"loss_d": float(loss_d.detach()), "r1": r1_val}


def pretrain_step(state: TrainState, real_batch: torch.Tensor) -> dict:
    """One alternating D/G update at the fixed global scale."""
    if state.phase != 1:
        raise ValueError("pretrain_step requires phase 1")
    cfg = state.cfg
    b = real_batch.shape[0]
    gspecs = [global_spec(cfg.p)] * b

    z_d = torch.from_numpy(draw_latents(_step_rng(state, "z-d"), b, cfg.d_z))
    with torch.no_grad():
        fake = state.gen(z_d, gspecs)
    metrics = _d_update(state, real_batch, fake)

    z_g = torch.from_numpy(draw_latents(_step_rng(state, "z-g"), b, cfg.d_z))
    fake_g = state.gen(z_g, gspecs)
    loss_g = F.softplus(-state.disc(fake_g)).mean()
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()

    metrics.update({"loss_g": float(loss_g.detach()), "teacher": 0.0})
    _check_finite(state, {k: v for k, v in metrics.items()
                          if k != "r1" or not np.isnan(v)})
    state.step += 1
    return metrics


def patch_train_step(state: TrainState, real_batch) -> dict:
    """One alternating D/G update on mixed global/patch batches.

    real_batch is (pixels (b,3,p,p) tensor, list of PatchSpec). Synthetic
    specs are drawn from the shared policy, independently for D and G.
    """
    if state.phase != 2 or state.teacher is None:
        raise ValueError("patch_train_step requires phase 2 with a teacher")
    cfg = state.cfg
    real, _real_specs = real_batch
    b = real.shape[0]
    hr_sizes = state.sampler._hr_sizes

    spec_rng = _step_rng(state, "fake-spec-d")
    fake_specs = [sample_fake_spec(spec_rng, state.policy, hr_sizes)
                  for _ in range(b)]
    z_d = torch.from_numpy(draw_latents(_step_rng(state, "z-d"), b, cfg.d_z))
    with torch.no_grad():
        fake = state.gen(z_d, fake_specs)
    metrics = _d_update(state, real, fake)

    spec_rng = _step_rng(state, "fake-spec-g")
    specs_g = [sample_fake_spec(spec_rng, state.policy, hr_sizes)
               for _ in range(b)]
    z_g = torch.from_numpy(draw_latents(_step_rng(state, "z-g"), b, cfg.d_z))
    fake_g = state.gen(z_g, specs_g)
    loss_adv = F.softplus(-state.disc(fake_g)).mean()

    teacher_val = 0.0
    loss_g = loss_adv
    if cfg.lambda_teacher > 0:
        with torch.no_grad():
            bases = state.teacher(z_g, [global_spec(cfg.p)] * b)
        terms = [teacher_loss(fake_g[i], specs_g[i], bases[i], cfg.w_l1,
                              cfg.w_perc, state.perceptual) for i in range(b)]
        t_mean = torch.stack(terms).mean()
        teacher_val = float(t_mean.detach())
        loss_g = loss_adv + cfg.lambda_teacher * t_mean

    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()

    metrics.update({"loss_g": float(loss_g.detach()), "teacher": teacher_val})
    _check_finite(state, {k: v for k, v in metrics.items()
                          if k != "r1" or not np.isnan(v)})
    state.step += 1
    return metrics


def _real_batch(state: TrainState):
    cfg = state.cfg
    base = state.step * cfg.batch_size
    if state.phase == 1:
        items = [state.sampler.draw_global(base + i) for i in range(cfg.batch_size)]
    else:
        items = [state.sampler.draw(base + i) for i in range(cfg.batch_size)]
    pixels = torch.from_numpy(np.stack(
        [it.pixels.transpose(2, 0, 1) for it in items]).astype(np.float32))
    specs = [it.spec for it in items]
    return (pixels, specs) if state.phase == 2 else pixels


def global_drift(gen: Generator, teacher: Generator, z_set: np.ndarray) -> float:
    """Mean absolute deviation of global views from the teacher's."""
    z = torch.as_tensor(np.asarray(z_set, dtype=np.float32))
    specs = [global_spec(gen.cfg.p)] * z.shape[0]
    with torch.no_grad():
        return float((gen(z, specs) - teacher(z, specs)).abs().mean())


# ---------------------------------------------------------------------------
# Phase runner: metrics CSV, checkpoints, resume
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    final_checkpoint: Path
    snapshots: list
    metrics_path: Path
    workdir: Path


def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    arrays, scalars = {}, {}
    for pid, st in sd["state"].items():
        for key, val in st.items():
            if torch.is_tensor(val):
                arrays[f"{prefix}/{pid}/{key}"] = val.detach().cpu().numpy()
            else:
                scalars.setdefault(str(pid), {})[key] = val
    return arrays, {"param_groups": sd["param_groups"], "scalars": scalars}


def _load_optimizer(opt: torch.optim.Optimizer, extra: dict, meta: dict,
                    prefix: str):
    groups = meta["param_groups"]
    state = {}
    for name, arr in extra.items():
        if not name.startswith(prefix + "/"):
            continue
        _, pid, key = name.split("/", 2)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    for pid, sc in meta.get("scalars", {}).items():
        state.setdefault(int(pid), {}).update(sc)
    opt.load_state_dict({"state": state, "param_groups": groups})


def _checkpoint_meta(state: TrainState) -> dict:
    return {
        "phase": state.phase,
        "step": state.step,
        "seed": state.cfg.seed,
        "config_hash": config_hash(state.cfg),
        "train_config": state.cfg.to_dict(),
        "stats": state.stats,
    }


def _save_state(state: TrainState, path: Path) -> Path:
    extra = {}
    if state.teacher is not None:
        for key, val in state.teacher.state_dict().items():
            extra["teacher/" + key] = val.detach().cpu().numpy()
    g_arrays, g_meta = _optimizer_arrays(state.opt_g, "optg")
    d_arrays, d_meta = _optimizer_arrays(state.opt_d, "optd")
    extra.update(g_arrays)
    extra.update(d_arrays)
    meta = _checkpoint_meta(state)
    meta["optimizer"] = {"g": g_meta, "d": d_meta}
    return save_checkpoint(path, state.gen, state.disc, meta, extra)


def _restore_state(cfg: TrainConfig, manifest: Manifest, path) -> TrainState:
    bundle = load_checkpoint(path)
    meta = bundle.meta
    if meta["config_hash"] != config_hash(cfg):
        raise ConfigError(f"checkpoint {path} was produced by a different "
                          "configuration; refusing to resume")
    phase = meta["phase"]
    gen, disc = bundle.gen, bundle.disc
    _set_phase_grads(gen, phase)
    teacher = None
    if phase == 2:
        teacher = clone_frozen(gen)
        teacher.load_state_dict(
            {k[len("teacher/"):]: torch.from_numpy(v)
             for k, v in bundle.extra.items() if k.startswith("teacher/")})
    opt_g, opt_d = _make_optimizers(cfg, gen, disc, phase)
    _load_optimizer(opt_g, bundle.extra, meta["optimizer"]["g"], "optg")
    _load_optimizer(opt_d, bundle.extra, meta["optimizer"]["d"], "optd")
    policy = sampling_policy(cfg)
    sampler = PatchSampler(manifest, policy,
                           seed=seeding.stream_int(cfg.seed, "data", phase))
    return TrainState(cfg=cfg, model_cfg=gen.cfg, phase=phase,
                      step=meta["step"], gen=gen, disc=disc, teacher=teacher,
                      opt_g=opt_g, opt_d=opt_d,
                      perceptual=RandomConvPerceptual(cfg.seed),
                      manifest=manifest, policy=policy, sampler=sampler,
                      stats=meta["stats"])


def _proxy_pfid(state: TrainState) -> float | None:
    from .metrics import Embedder, pfid
    policy = SamplingPolicy(p=state.cfg.p, s_lo=state.cfg.s_lo,
                            s_hi=state.cfg.s_hi, global_prob=0.0)
    if not state.manifest.hr_sizes(policy):
        return None
    if not hasattr(state, "_embedder"):
        state._embedder = Embedder(seed=state.cfg.seed)
    report = pfid(state.manifest, batch_synthesizer(state.gen), state._embedder,
                  n_patches=state.cfg.proxy_pfid_n,
                  seed=seeding.stream_int(state.cfg.seed, "proxy-pfid"),
                  policy=policy)
    return report["value"]


def _write_samples(state: TrainState, path: Path):
    from .metrics import contact_sheet
    rng = seeding.substream(state.cfg.seed, "sample-sheet")
    zs = draw_latents(rng, 16, state.cfg.d_z)
    imgs, caps = [], []
    for z in zs:
        from .netcore import synthesize_patch
        imgs.append(synthesize_patch(state.gen, z, global_spec(state.cfg.p)))
        caps.append(f"s={state.cfg.p} v=(0.50,0.50)")
    sheet = contact_sheet(imgs, caps, cols=4)
    sheet.save(path, format="PNG")


def run_phase(cfg: TrainConfig, manifest: Manifest, phase: int, workdir,
              init_checkpoint=None, resume: bool = False) -> RunResult:
    """Execute one training phase, logging metrics and snapshotting checkpoints.

    Phase 2 requires the phase-1 checkpoint; with resume=True the latest
    snapshot in workdir is loaded and the trajectory continues bit-for-bit.
    """
    if phase not in (1, 2):
        raise ConfigError(f"phase must be 1 or 2, got {phase}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "config.json").write_text(
        json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")

    if resume:
        snaps = sorted(workdir.glob("ckpt-step*.bin"))
        if not snaps:
            raise ConfigError(f"--resume requested but no snapshots in {workdir}")
        state = _restore_state(cfg, manifest, snaps[-1])
        if state.phase != phase:
            raise ConfigError(f"latest snapshot is phase {state.phase}, "
                              f"asked to resume phase {phase}")
    elif phase == 1:
        state = build_phase1_state(cfg, manifest)
    else:
        if init_checkpoint is None:
            raise ConfigError("phase 2 requires a phase-1 init checkpoint")
        state = build_phase2_state(cfg, manifest, init_checkpoint)

    teacher_digest = params_digest(state.teacher) if state.teacher else None
    total = cfg.steps_phase1 if phase == 1 else cfg.steps_phase2
    metrics_path = workdir / "metrics.csv"
    fresh_log = not (resume and metrics_path.exists())
    log = open(metrics_path, "w" if fresh_log else "a", newline="")
    writer = csv.writer(log)
    if fresh_log:
        writer.writerow(METRIC_COLUMNS)
    started = time.time()

    def log_row(step, metrics, proxy):
        def fmt(v):
            if v is None:
                return ""
            return "" if isinstance(v, float) and np.isnan(v) else f"{v:.8g}"
        writer.writerow([
            step, fmt(metrics.get("loss_d")), fmt(metrics.get("loss_g")),
            fmt(metrics.get("r1")), fmt(metrics.get("teacher")), fmt(proxy),
            f"{time.time() - started:.3f}"])
        log.flush()

    snapshots = []
    try:
        if state.step == 0:
            log_row(0, {}, _proxy_pfid(state))
        while state.step < total:
            step_idx = state.step
            batch = _real_batch(state)
            metrics = (pretrain_step(state, batch) if phase == 1
                       else patch_train_step(state, batch))
            done = state.step
            if done % cfg.log_every == 0 or done == total:
                proxy = None
                if done == total or (cfg.eval_every and done % cfg.eval_every == 0):
                    proxy = _proxy_pfid(state)
                log_row(done, metrics, proxy)
            if cfg.snapshot_every and done % cfg.snapshot_every == 0 and done < total:
                snap = _save_state(state, workdir / f"ckpt-step{done:06d}.bin")
                snapshots.append(snap)
                _write_samples(state, workdir / f"samples-step{done:06d}.png")
            del step_idx
    finally:
        log.close()

    if state.teacher is not None and params_digest(state.teacher) != teacher_digest:
        raise TrainingDiverged("teacher parameters changed during phase 2")

    final = _save_state(state, workdir / f"ckpt-phase{phase}-final.bin")
    _write_samples(state, workdir / f"samples-phase{phase}-final.png")
    return RunResult(final_checkpoint=final, snapshots=snapshots,
                     metrics_path=metrics_path, workdir=workdir)
