"""Adversarial distillation training loop.

Each step runs n_critic critic updates (score difference + gradient
penalty) followed by one generator update on the weighted integral loss.
The hint term is active only while the per-epoch decay lambda is positive;
in Stage II the hint provider is never queried and the adaptation layer
receives no gradient.
"""

import csv
import hashlib
import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import losses as losses_mod
from .critic import Critic, build_critic, gradient_penalty
from .distill import (ADAPTATION_MLP_RATIO, AdaptationLayer, build_adaptation,
                      lambda_decay)
from .errors import ChecksumError, ParameterError, VersionError
from .generator import DehazeGenerator, GeneratorConfig, build_generator
from .metrics import psnr as psnr_metric
from .metrics import ssim as ssim_metric
from .priors import DEFAULT_WEIGHT_FLOOR

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PTDZCKPT"
CHECKPOINT_VERSION = 1

HISTORY_COLUMNS = ("epoch", "lambda", "lr", "hint_weight", "loss_adv", "loss_per",
                   "loss_trans", "loss_hint", "loss_gen", "loss_critic", "gp",
                   "val_psnr", "val_ssim")


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 4
    lr0: float = 1e-4
    delta: float = 0.5
    n_critic: int = 5
    gp_coeff: float = 10.0
    weights: losses_mod.LossWeights = field(default_factory=losses_mod.LossWeights)
    seed: int = 0
    patience: int = 50
    crop: int = 256
    steps_per_epoch: int | None = None
    flip: bool = True
    perceptual: str = "vgg16"
    critic_objective: str = "wgan"
    adaptation_mode: str = "ptb"
    adaptation_mlp_ratio: int = ADAPTATION_MLP_RATIO
    teacher_channels: int = 512
    w_min: float = DEFAULT_WEIGHT_FLOOR
    use_hazemap_cache: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = losses_mod.LossWeights(**self.weights)
        if self.epochs < 1 or self.batch_size < 1 or self.n_critic < 1:
            raise ParameterError("epochs, batch_size and n_critic must be >= 1")
        if self.critic_objective not in ("paper", "wgan"):
            raise ParameterError("critic_objective must be 'paper' or 'wgan'")


def linear_lr(e: int, total_epochs: int, lr0: float) -> float:
    """Uniform decay from lr0 at epoch 0 to zero at epoch E."""
    return lr0 * (1.0 - e / total_epochs)


@dataclass
class TrainState:
    gen_cfg: GeneratorConfig
    cfg: TrainConfig
    generator: DehazeGenerator
    critic: Critic
    adaptation: AdaptationLayer
    opt_gen: torch.optim.Adam
    opt_critic: torch.optim.Adam
    epoch: int = 0
    gp_rng: torch.Generator | None = None
    aug_rng: np.random.Generator | None = None
    run_config: dict | None = None  # resolved CLI configuration snapshot


def build_state(gen_cfg: GeneratorConfig | None = None,
                cfg: TrainConfig | None = None) -> TrainState:
    gen_cfg = gen_cfg or GeneratorConfig()
    cfg = cfg or TrainConfig()
    generator = build_generator(gen_cfg, seed=cfg.seed)
    critic = build_critic(seed=cfg.seed + 1)
    adaptation = build_adaptation(gen_cfg.channel_schedule[-1], cfg.teacher_channels,
                                  cfg.adaptation_mode, cfg.adaptation_mlp_ratio,
                                  seed=cfg.seed + 2)
    opt_gen = torch.optim.Adam(
        list(generator.parameters()) + list(adaptation.parameters()),
        lr=cfg.lr0, betas=(0.9, 0.999))
    # lower beta1 keeps the penalized critic stable
    opt_critic = torch.optim.Adam(critic.parameters(), lr=cfg.lr0, betas=(0.5, 0.9))
    gp_rng = torch.Generator().manual_seed(cfg.seed + 3)
    aug_rng = np.random.default_rng(cfg.seed + 4)
    return TrainState(gen_cfg, cfg, generator, critic, adaptation,
                      opt_gen, opt_critic, 0, gp_rng, aug_rng)


def assemble_batch(loaded_pairs, cfg: TrainConfig, rng: np.random.Generator):
    """Crop/flip a list of decoded pairs into model tensors.

    Returns x (Bx4xHxW hazy+map), y (Bx3xHxW clean), tau (Bx1xHxW floored
    weight mask) and the sample ids.
    """
    xs, ys, taus, ids = [], [], [], []
    for lp in loaded_pairs:
        hazy, clean, hazemap = data_mod.augment(lp, cfg.crop, rng, flip=cfg.flip)
        x = np.concatenate([hazy, hazemap[..., None]], axis=2)
        xs.append(torch.from_numpy(x.astype(np.float32)).permute(2, 0, 1))
        ys.append(torch.from_numpy(clean.astype(np.float32)).permute(2, 0, 1))
        taus.append(torch.from_numpy(
            np.maximum(hazemap, cfg.w_min).astype(np.float32)).unsqueeze(0))
        ids.append(lp.id)
    return {"x": torch.stack(xs), "y": torch.stack(ys),
            "tau": torch.stack(taus), "ids": ids}


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, batch: dict, lam: float, extractor,
               hint_provider=None) -> dict:
    """n_critic critic updates then one generator update; returns scalar logs."""
    cfg = state.cfg
    x, y, tau = batch["x"], batch["y"], batch["tau"]

    # critic phase: generator frozen, eval-mode fakes
    state.generator.eval()
    with torch.no_grad():
        fake_fixed = state.generator(x)
    state.critic.train()
    critic_logs = []
    for _ in range(cfg.n_critic):
        state.opt_critic.zero_grad(set_to_none=True)
        gp = gradient_penalty(state.critic, y, fake_fixed, state.gp_rng)
        score_real = state.critic(y)
        score_fake = state.critic(fake_fixed)
        c_loss = losses_mod.critic_loss(score_real, score_fake, cfg.weights,
                                        gp=gp, gp_coeff=cfg.gp_coeff,
                                        orientation=cfg.critic_objective)
        c_loss.backward()
        state.opt_critic.step()
        critic_logs.append((c_loss.detach().item(), gp.detach().item()))

    # generator phase: critic frozen
    for p in state.critic.parameters():
        p.requires_grad_(False)
    try:
        state.generator.train()
        state.adaptation.train()
        state.opt_gen.zero_grad(set_to_none=True)
        fake, bottleneck = state.generator.forward_with_bottleneck(x)
        adv = losses_mod.adversarial_loss(state.critic(fake))
        per = losses_mod.perceptual_loss(fake, y, extractor)
        trans = losses_mod.transmission_loss(fake, y, tau)
        hint = None
        if lam > 0.0 and cfg.weights.hint > 0.0:
            if hint_provider is None:
                raise ParameterError("lambda > 0 requires a hint provider")
            hints = hint_provider.hints(batch["ids"], x).detach()
            adapted = state.adaptation(bottleneck)
            hint = losses_mod.hint_loss(adapted, hints)
        parts = losses_mod.LossParts(adv=adv, per=per, trans=trans, hint=hint)
        g_loss = losses_mod.integral_loss(parts, cfg.weights, lam)
        g_loss.backward()
        state.opt_gen.step()
    finally:
        for p in state.critic.parameters():
            p.requires_grad_(True)

    return {
        "loss_adv": adv.detach().item(),
        "loss_per": per.detach().item(),
        "loss_trans": trans.detach().item(),
        "loss_hint": hint.detach().item() if hint is not None else 0.0,
        "loss_gen": g_loss.detach().item(),
        "loss_critic": float(np.mean([c for c, _ in critic_logs])),
        "gp": float(np.mean([g for _, g in critic_logs])),
    }


def pad_to_multiple(image: np.ndarray, multiple: int = 16):
    """Reflect-pad HxW(xC) up to the next multiple; returns (padded, (H, W))."""
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="reflect"), (h, w)


def padded_inference(model: DehazeGenerator, hazy: np.ndarray,
                     hazemap: np.ndarray) -> np.ndarray:
    """Eval-mode dehazing at any resolution; output matches the input size."""
    padded_hazy, (h, w) = pad_to_multiple(hazy, model.cfg.spatial_divisor)
    padded_map, _ = pad_to_multiple(hazemap, model.cfg.spatial_divisor)
    x = np.concatenate([padded_hazy, padded_map[..., None]], axis=2)
    tensor = torch.from_numpy(x.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(tensor)
    finally:
        model.train(was_training)
    return out.squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)[:h, :w]


def validate(state: TrainState, val_loaded) -> tuple:
    """Mean PSNR/SSIM of full-size padded inference over the validation pairs."""
    if not val_loaded:
        return math.nan, math.nan
    psnrs, ssims = [], []
    for lp in val_loaded:
        restored = padded_inference(state.generator, lp.hazy, lp.hazemap)
        psnrs.append(psnr_metric(restored, lp.clean))
        ssims.append(ssim_metric(restored, lp.clean))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def _epoch_batches(loaded_pairs, cfg: TrainConfig, batch_rng: np.random.Generator,
                   steps: int):
    """Yield `steps` batches, reshuffling whenever a pass completes."""
    produced = 0
    while produced < steps:
        for batch_pairs in data_mod.make_batches(loaded_pairs, cfg.batch_size, batch_rng):
            yield batch_pairs
            produced += 1
            if produced >= steps:
                return


def train(gen_cfg: GeneratorConfig, cfg: TrainConfig, dataset_root,
          hint_provider=None, out_dir=None, extractor=None, run_config=None):
    """Full training run; returns (state, history, best_checkpoint_path)."""
    torch.manual_seed(cfg.seed)
    state = build_state(gen_cfg, cfg)
    state.run_config = run_config
    extractor = extractor if extractor is not None else losses_mod.make_extractor(cfg.perceptual)

    pairs = data_mod.scan_dataset(dataset_root)
    train_pairs = [p for p in pairs if p.split == "train"]
    val_pairs = [p for p in pairs if p.split == "val"]
    if not train_pairs:
        raise ParameterError(f"no training pairs under {dataset_root}")
    log.info("training on %d pairs, validating on %d", len(train_pairs), len(val_pairs))

    train_loaded = [data_mod.load_pair(p, use_cache=cfg.use_hazemap_cache)
                    for p in train_pairs]
    val_loaded = [data_mod.load_pair(p, use_cache=cfg.use_hazemap_cache)
                  for p in val_pairs]

    if hint_provider is None and cfg.weights.hint > 0:
        raise ParameterError(
            "hint weight is nonzero but no hint provider was given; "
            "pass one or set weights.hint = 0")

    steps = cfg.steps_per_epoch or math.ceil(len(train_loaded) / cfg.batch_size)
    batch_rng = np.random.default_rng(cfg.seed + 5)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    best_psnr = -math.inf
    best_path = None
    stale_epochs = 0

    for e in range(cfg.epochs):
        state.epoch = e
        lam = lambda_decay(e, cfg.epochs, cfg.delta)
        lr = linear_lr(e, cfg.epochs, cfg.lr0)
        _set_lr(state.opt_gen, lr)
        _set_lr(state.opt_critic, lr)

        step_logs = []
        for batch_pairs in _epoch_batches(train_loaded, cfg, batch_rng, steps):
            batch = assemble_batch(batch_pairs, cfg, state.aug_rng)
            step_logs.append(train_step(state, batch, lam, extractor, hint_provider))

        val_psnr, val_ssim = validate(state, val_loaded)
        row = {"epoch": e, "lambda": lam, "lr": lr,
               "hint_weight": lam * cfg.weights.hint}
        for key in ("loss_adv", "loss_per", "loss_trans", "loss_hint",
                    "loss_gen", "loss_critic", "gp"):
            row[key] = float(np.mean([s[key] for s in step_logs]))
        row["val_psnr"] = val_psnr
        row["val_ssim"] = val_ssim
        history.append(row)
        log.info("epoch %d: lambda=%.4f lr=%.2e gen=%.4f critic=%.4f val_psnr=%.2f",
                 e, lam, lr, row["loss_gen"], row["loss_critic"], val_psnr)

        if out_dir is not None:
            save_checkpoint(state, out_dir / "last.ckpt")
            write_history(history, out_dir / "history.csv")

        improved = not math.isnan(val_psnr) and val_psnr > best_psnr
        if improved:
            best_psnr = val_psnr
            stale_epochs = 0
            if out_dir is not None:
                best_path = out_dir / "best.ckpt"
                save_checkpoint(state, best_path)
        else:
            stale_epochs += 1
            if val_loaded and stale_epochs >= cfg.patience:
                log.info("early stop at epoch %d (no val PSNR gain in %d epochs)",
                         e, cfg.patience)
                break

    if out_dir is not None:
        write_history(history, out_dir / "history.csv")
    return state, history, best_path


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


# ---------------------------------------------------------------------------
# Checkpoints: versioned container with a sha256 integrity digest.


def _state_payload(state: TrainState) -> dict:
    return {
        "epoch": state.epoch,
        "gen_cfg": asdict(state.gen_cfg),
        "train_cfg": asdict(state.cfg),
        "generator": state.generator.state_dict(),
        "critic": state.critic.state_dict(),
        "adaptation": state.adaptation.state_dict(),
        "opt_gen": state.opt_gen.state_dict(),
        "opt_critic": state.opt_critic.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "gp_rng": state.gp_rng.get_state() if state.gp_rng is not None else None,
        "aug_rng": state.aug_rng.bit_generator.state if state.aug_rng is not None else None,
        "run_config": state.run_config,
    }


def save_checkpoint(state: TrainState, path) -> Path:
    buf = io.BytesIO()
    torch.save(_state_payload(state), buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    Path(path).write_bytes(header + digest + payload)
    return Path(path)


def load_checkpoint(path) -> TrainState:
    blob = Path(path).read_bytes()
    head_len = len(CHECKPOINT_MAGIC) + 4 + 32
    if len(blob) < head_len or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ChecksumError(f"{path} is not a checkpoint file")
    version, = struct.unpack("<I", blob[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 4])
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint {path} has version {version}; this build reads {CHECKPOINT_VERSION}"
        )
    digest = blob[len(CHECKPOINT_MAGIC) + 4:head_len]
    payload = blob[head_len:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"checkpoint {path} failed its integrity check")
    snap = torch.load(io.BytesIO(payload), weights_only=False)

    gen_cfg = GeneratorConfig(**snap["gen_cfg"])
    cfg = TrainConfig(**snap["train_cfg"])
    state = build_state(gen_cfg, cfg)
    state.epoch = snap["epoch"]
    state.generator.load_state_dict(snap["generator"])
    state.critic.load_state_dict(snap["critic"])
    state.adaptation.load_state_dict(snap["adaptation"])
    state.opt_gen.load_state_dict(snap["opt_gen"])
    state.opt_critic.load_state_dict(snap["opt_critic"])
    torch.set_rng_state(snap["torch_rng"])
    if snap["gp_rng"] is not None:
        state.gp_rng.set_state(snap["gp_rng"])
    if snap["aug_rng"] is not None:
        state.aug_rng.bit_generator.state = snap["aug_rng"]
    state.run_config = snap.get("run_config")
    return state


def build_surrogate_teacher(base_channels: int = 32, seed: int = 7) -> DehazeGenerator:
    """Double-width generator used as a frozen stand-in teacher."""
    cfg = GeneratorConfig(base_channels=base_channels)
    teacher = build_generator(cfg, seed=seed)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher
