"""Deterministic desk-scale training, inference and checkpointing.

One step is: draw the next batch of the epoch order, update the
discriminator on (real pair, detached fake) when the GAN weight is
nonzero, then update the generator. Batch order is an epoch-wise
Fisher-Yates shuffle over sample indices driven by SplitMix64 (see
:mod:`sar2rgb.seeding`), so the whole schedule is a pure function of
(seed, step, dataset size, batch size) -- that function, together with
the saved optimizer moments, is the complete RNG state a checkpoint
needs for exact resume.

Checkpoint container (extension ``.s2ck``), little-endian::

    magic   'S2CK'                   4 bytes
    version u8 (currently 1)
    meta_len u32, meta JSON (config, step, counters, section manifest)
    payload: concatenated little-endian f32 blobs, one per section
    crc32 u32 over everything after the magic

Section names are ``generator/<param>``, ``discriminator/<param>`` and
``opt_g|opt_d/<param>/exp_avg|exp_avg_sq``.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import evalkit
from .curation import model_to_rgb, normalize_s1, rgb_to_model
from .rastercore import Tile
from .sargen import (
    DiscriminatorConfig,
    GanKind,
    GanRole,
    GeneratorConfig,
    LossConfig,
    Variant,
    build_discriminator,
    build_generator,
    gan_loss,
    l1_loss,
    total_generator_loss,
)
from .seeding import SplitMix64, epoch_seed, fisher_yates

CKPT_MAGIC = b"S2CK"
CKPT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """Training aborted because a loss went non-finite (never clamped:
    silent recovery would invalidate trend comparisons)."""


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    """Adam settings. beta1 defaults per lineage (0.0 SPADE, 0.5
    pix2pixHD). epsilon is kept tiny so updates are invariant to the
    overall loss scale: the weight presets (L1, 100*L1, GAN + 1000*L1)
    then differ only by the terms they name, not by a hidden step-size
    retuning through the denominator guard."""

    learning_rate: float = 2e-4
    beta1: float | None = None  # None = lineage default (0.0 SPADE, 0.5 pix2pixHD)
    beta2: float = 0.999
    epsilon: float = 1e-12

    def resolved_beta1(self, variant: Variant) -> float:
        if self.beta1 is not None:
            return self.beta1
        return 0.0 if variant is Variant.SPADE else 0.5


@dataclass(frozen=True)
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 4
    max_steps: int = 0
    seed: int = 0
    eval_every: int = 100
    deterministic: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass(frozen=True)
class TraceRow:
    step: int
    generator_total: float
    gan_term: float
    l1_term: float
    discriminator_loss: float | None = None
    eval_mae: float | None = None
    eval_psnr: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "generator_total": self.generator_total,
                "gan_term": self.gan_term,
                "l1_term": self.l1_term,
                "discriminator_loss": self.discriminator_loss,
                "eval_mae": self.eval_mae,
                "eval_psnr": self.eval_psnr,
            }
        )


@dataclass
class LossTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"trace steps must increase, got {row.step} after {self.rows[-1].step}")
        self.rows.append(row)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(row.to_json() + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "LossTrace":
        trace = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    trace.append(TraceRow(**json.loads(line)))
        return trace


@dataclass
class OptimState:
    step: int
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray] | None = None
    opt_generator: OptimState | None = None
    opt_discriminator: OptimState | None = None


# --- config (de)serialization ----------------------------------------------


def config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "generator": {
            "variant": cfg.generator.variant.value,
            "in_channels": cfg.generator.in_channels,
            "out_channels": cfg.generator.out_channels,
            "image_size": cfg.generator.image_size,
            "base_width": cfg.generator.base_width,
            "n_up_blocks": cfg.generator.n_up_blocks,
            "n_res_blocks": cfg.generator.n_res_blocks,
            "seed_size": cfg.generator.seed_size,
            "mod_hidden": cfg.generator.mod_hidden,
        },
        "discriminator": {
            "n_scales": cfg.discriminator.n_scales,
            "n_layers": cfg.discriminator.n_layers,
            "base_width": cfg.discriminator.base_width,
            "in_channels": cfg.discriminator.in_channels,
            "max_width_mult": cfg.discriminator.max_width_mult,
        },
        "loss": {
            "gan_weight": cfg.loss.gan_weight,
            "l1_weight": cfg.loss.l1_weight,
            "gan_kind": cfg.loss.gan_kind.value if cfg.loss.gan_kind else None,
        },
        "optimizer": {
            "learning_rate": cfg.optimizer.learning_rate,
            "beta1": cfg.optimizer.beta1,
            "beta2": cfg.optimizer.beta2,
            "epsilon": cfg.optimizer.epsilon,
        },
        "batch_size": cfg.batch_size,
        "max_steps": cfg.max_steps,
        "seed": cfg.seed,
        "eval_every": cfg.eval_every,
        "deterministic": cfg.deterministic,
    }


def _strict(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")


def config_from_dict(obj: dict) -> TrainConfig:
    _strict(obj, {"generator", "discriminator", "loss", "optimizer", "batch_size",
                  "max_steps", "seed", "eval_every", "deterministic"}, "train config")
    g = dict(obj.get("generator", {}))
    _strict(g, {"variant", "in_channels", "out_channels", "image_size", "base_width",
                "n_up_blocks", "n_res_blocks", "seed_size", "mod_hidden"}, "generator config")
    if "variant" in g:
        g["variant"] = Variant(g["variant"])
    d = dict(obj.get("discriminator", {}))
    _strict(d, {"n_scales", "n_layers", "base_width", "in_channels", "max_width_mult"},
            "discriminator config")
    lo = dict(obj.get("loss", {}))
    _strict(lo, {"gan_weight", "l1_weight", "gan_kind"}, "loss config")
    if lo.get("gan_kind") is not None:
        lo["gan_kind"] = GanKind(lo["gan_kind"])
    op = dict(obj.get("optimizer", {}))
    _strict(op, {"learning_rate", "beta1", "beta2", "epsilon"}, "optimizer config")
    return TrainConfig(
        generator=GeneratorConfig(**g),
        discriminator=DiscriminatorConfig(**d),
        loss=LossConfig(**lo),
        optimizer=OptimConfig(**op),
        batch_size=obj.get("batch_size", 4),
        max_steps=obj.get("max_steps", 0),
        seed=obj.get("seed", 0),
        eval_every=obj.get("eval_every", 100),
        deterministic=obj.get("deterministic", False),
    )


# --- model/optimizer state capture ------------------------------------------


def _module_state(module: nn.Module) -> dict[str, np.ndarray]:
    return {
        name: param.detach().cpu().numpy().astype(np.float32, copy=True)
        for name, param in module.named_parameters()
    }


def _load_module_state(module: nn.Module, state: dict[str, np.ndarray]) -> None:
    tensors = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in state.items()}
    module.load_state_dict(tensors, strict=True)


def _capture_optim(opt: torch.optim.Adam, module: nn.Module) -> OptimState:
    names = [name for name, _ in module.named_parameters()]
    params = [p for _, p in module.named_parameters()]
    exp_avg, exp_avg_sq = {}, {}
    step = 0
    for name, param in zip(names, params):
        state = opt.state.get(param, {})
        if state:
            step = int(state["step"].item())
            exp_avg[name] = state["exp_avg"].detach().numpy().astype(np.float32, copy=True)
            exp_avg_sq[name] = state["exp_avg_sq"].detach().numpy().astype(np.float32, copy=True)
        else:
            exp_avg[name] = np.zeros(param.shape, dtype=np.float32)
            exp_avg_sq[name] = np.zeros(param.shape, dtype=np.float32)
    return OptimState(step=step, exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)


def _restore_optim(opt: torch.optim.Adam, module: nn.Module, state: OptimState) -> None:
    if state.step == 0:
        return  # fresh optimizer: zero moments are implicit
    for name, param in module.named_parameters():
        opt.state[param] = {
            "step": torch.tensor(float(state.step)),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(state.exp_avg[name])),
            "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(state.exp_avg_sq[name])),
        }


# --- checkpoint container ----------------------------------------------------


def _checkpoint_sections(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    sections = [(f"generator/{n}", a) for n, a in ckpt.generator.items()]
    if ckpt.discriminator is not None:
        sections += [(f"discriminator/{n}", a) for n, a in ckpt.discriminator.items()]
    for prefix, opt in (("opt_g", ckpt.opt_generator), ("opt_d", ckpt.opt_discriminator)):
        if opt is None:
            continue
        sections += [(f"{prefix}/{n}/exp_avg", a) for n, a in opt.exp_avg.items()]
        sections += [(f"{prefix}/{n}/exp_avg_sq", a) for n, a in opt.exp_avg_sq.items()]
    return sections


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    sections = _checkpoint_sections(ckpt)
    manifest = []
    blobs = []
    offset = 0
    for name, arr in sections:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    meta = {
        "config": config_to_dict(ckpt.config),
        "step": ckpt.step,
        "counters": {
            "opt_g_step": ckpt.opt_generator.step if ckpt.opt_generator else None,
            "opt_d_step": ckpt.opt_discriminator.step if ckpt.opt_discriminator else None,
            "has_discriminator": ckpt.discriminator is not None,
        },
        "sections": manifest,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = struct.pack("<BI", CKPT_VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(CKPT_MAGIC + body + struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    if len(raw) < 13:
        raise CheckpointCorruptError("truncated checkpoint")
    body, (stored_crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointCorruptError("checkpoint checksum mismatch (truncated or corrupt file)")
    version, meta_len = struct.unpack_from("<BI", body, 0)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    meta = json.loads(body[5 : 5 + meta_len].decode("utf-8"))
    payload = body[5 + meta_len :]

    arrays: dict[str, np.ndarray] = {}
    for sec in meta["sections"]:
        start, nbytes = sec["offset"], sec["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointCorruptError(f"section {sec['name']} overruns payload")
        arrays[sec["name"]] = np.frombuffer(
            payload[start : start + nbytes], dtype="<f4"
        ).reshape(sec["shape"]).copy()

    cfg = config_from_dict(meta["config"])
    counters = meta["counters"]
    generator = {n[len("generator/"):]: a for n, a in arrays.items() if n.startswith("generator/")}
    discriminator = None
    if counters["has_discriminator"]:
        discriminator = {
            n[len("discriminator/"):]: a
            for n, a in arrays.items()
            if n.startswith("discriminator/")
        }

    def opt_state(prefix: str, step: int | None) -> OptimState | None:
        if step is None:
            return None
        exp_avg, exp_avg_sq = {}, {}
        for name, arr in arrays.items():
            if not name.startswith(prefix + "/"):
                continue
            stem = name[len(prefix) + 1 :]
            if stem.endswith("/exp_avg"):
                exp_avg[stem[: -len("/exp_avg")]] = arr
            elif stem.endswith("/exp_avg_sq"):
                exp_avg_sq[stem[: -len("/exp_avg_sq")]] = arr
        return OptimState(step=step, exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)

    return Checkpoint(
        config=cfg,
        step=meta["step"],
        generator=generator,
        discriminator=discriminator,
        opt_generator=opt_state("opt_g", counters["opt_g_step"]),
        opt_discriminator=opt_state("opt_d", counters["opt_d_step"]),
    )


# --- training -----------------------------------------------------------------


def _model_seeds(seed: int) -> tuple[int, int]:
    stream = SplitMix64(seed)
    return stream.next_uint64(), stream.next_uint64()


def _epoch_order(seed: int, epoch: int, n: int) -> list[int]:
    return fisher_yates(n, SplitMix64(epoch_seed(seed, epoch)))


def _to_model_space(pairs: Sequence[tuple[Tile, Tile]], image_size: int):
    xs, ys = [], []
    for s1, s2 in pairs:
        if s1.data.shape[1:] != (image_size, image_size) or s2.data.shape[1:] != (
            image_size,
            image_size,
        ):
            raise ValueError(
                f"pair {s1.meta.tile_id!r} does not match configured image size {image_size}"
            )
        xs.append(normalize_s1(s1))
        ys.append(rgb_to_model(s2))
    return (
        torch.from_numpy(np.stack(xs)),
        torch.from_numpy(np.stack(ys)),
    )


def _eval_metrics(generator: nn.Module, eval_pairs: Sequence[tuple[Tile, Tile]]):
    maes, psnrs = [], []
    with torch.no_grad():
        for s1, s2 in eval_pairs:
            x = torch.from_numpy(normalize_s1(s1)).unsqueeze(0)
            pred = model_to_rgb(generator(x).squeeze(0).numpy(), tile_id=s1.meta.tile_id)
            maes.append(evalkit.mae(pred, s2))
            psnrs.append(evalkit.psnr(pred, s2))
    return float(np.mean(maes)), float(np.mean(psnrs))


def train(
    cfg: TrainConfig,
    train_pairs: Sequence[tuple[Tile, Tile]],
    eval_pairs: Sequence[tuple[Tile, Tile]] = (),
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, LossTrace]:
    """Train a (generator, discriminator, loss-config) triple.

    ``train_pairs`` are (SAR-dB tile, reflectance RGB tile) pairs.
    With gan_weight 0 the discriminator is never constructed and every
    step is a pure supervised update. Returns the final checkpoint and
    the per-step loss trace (evaluation metrics at multiples of
    ``eval_every`` and at the final step). Pass ``resume`` to continue a
    saved run up to cfg.max_steps; the continuation is step-for-step
    identical to the uninterrupted run.
    """
    if len(train_pairs) == 0:
        raise ValueError("training needs at least one pair")
    if resume is not None:
        ours, theirs = config_to_dict(cfg), config_to_dict(resume.config)
        ours.pop("max_steps")  # run length may change on resume
        theirs.pop("max_steps")
        if ours != theirs:
            raise ValueError("resume checkpoint was produced by a different config")

    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        return _train_inner(cfg, train_pairs, eval_pairs, resume)
    finally:
        if cfg.deterministic:
            torch.set_num_threads(prev_threads)
            torch.use_deterministic_algorithms(prev_det)


def _train_inner(cfg, train_pairs, eval_pairs, resume):
    use_gan = cfg.loss.gan_weight > 0
    variant = cfg.generator.variant
    gan_kind = cfg.loss.resolved_gan_kind(variant)
    betas = (cfg.optimizer.resolved_beta1(variant), cfg.optimizer.beta2)

    x_all, y_all = _to_model_space(train_pairs, cfg.generator.image_size)

    g_seed, d_seed = _model_seeds(cfg.seed)
    generator = build_generator(cfg.generator, g_seed)
    discriminator = build_discriminator(cfg.discriminator, d_seed) if use_gan else None

    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.optimizer.learning_rate,
                             betas=betas, eps=cfg.optimizer.epsilon)
    opt_d = (
        torch.optim.Adam(discriminator.parameters(), lr=cfg.optimizer.learning_rate,
                         betas=betas, eps=cfg.optimizer.epsilon)
        if use_gan
        else None
    )

    start_step = 0
    if resume is not None:
        start_step = resume.step
        _load_module_state(generator, resume.generator)
        if resume.opt_generator is not None:
            _restore_optim(opt_g, generator, resume.opt_generator)
        if use_gan:
            if resume.discriminator is None:
                raise ValueError("resume checkpoint lacks discriminator state")
            _load_module_state(discriminator, resume.discriminator)
            if resume.opt_discriminator is not None:
                _restore_optim(opt_d, discriminator, resume.opt_discriminator)

    n = len(train_pairs)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    trace = LossTrace()
    order: list[int] = []
    order_epoch = -1

    for step in range(start_step + 1, cfg.max_steps + 1):
        epoch, slot = divmod(step - 1, batches_per_epoch)
        if epoch != order_epoch:
            order = _epoch_order(cfg.seed, epoch, n)
            order_epoch = epoch
        idx = order[slot * cfg.batch_size : (slot + 1) * cfg.batch_size]
        x_b, y_b = x_all[idx], y_all[idx]

        d_loss_val = None
        if use_gan:
            with torch.no_grad():
                fake_detached = generator(x_b)
            opt_d.zero_grad()
            d_loss = 0.5 * (
                gan_loss(discriminator(x_b, y_b), GanRole.D_REAL, gan_kind)
                + gan_loss(discriminator(x_b, fake_detached), GanRole.D_FAKE, gan_kind)
            )
            d_loss.backward()
            opt_d.step()
            d_loss_val = float(d_loss.detach())

        opt_g.zero_grad()
        fake = generator(x_b)
        l1_term = l1_loss(fake, y_b)
        if use_gan:
            gan_term = gan_loss(discriminator(x_b, fake), GanRole.G, gan_kind)
        else:
            gan_term = torch.zeros(())
        total = total_generator_loss(cfg.loss, gan_term, l1_term)
        total.backward()
        opt_g.step()

        total_val = float(total.detach())
        gan_val = float(gan_term.detach())
        l1_val = float(l1_term.detach())
        bad = [v for v in (total_val, gan_val, l1_val, d_loss_val) if v is not None and not math.isfinite(v)]
        if bad:
            raise NonFiniteLossError(f"non-finite loss at step {step}: {bad}")

        eval_mae = eval_psnr = None
        if eval_pairs and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            eval_mae, eval_psnr = _eval_metrics(generator, eval_pairs)
        trace.append(
            TraceRow(step, total_val, gan_val, l1_val, d_loss_val, eval_mae, eval_psnr)
        )

    ckpt = Checkpoint(
        config=cfg,
        step=max(start_step, cfg.max_steps),
        generator=_module_state(generator),
        discriminator=_module_state(discriminator) if use_gan else None,
        opt_generator=_capture_optim(opt_g, generator),
        opt_discriminator=_capture_optim(opt_d, discriminator) if use_gan else None,
    )
    return ckpt, trace


def restore_generator(ckpt: Checkpoint) -> nn.Module:
    """Rebuild the generator behind a checkpoint with its saved weights."""
    g_seed, _ = _model_seeds(ckpt.config.seed)
    generator = build_generator(ckpt.config.generator, g_seed)
    _load_module_state(generator, ckpt.generator)
    generator.eval()
    return generator


def infer(ckpt: Checkpoint, s1_tiles: Sequence[Tile]) -> list[Tile]:
    """Translate SAR-dB tiles to reflectance RGB tiles, one at a time.

    Per tile: normalize_s1 -> generate -> model_to_rgb; outputs carry the
    input's tile id and band roles [RED, GREEN, BLUE] with values in
    [0, 1]. Deterministic for a fixed checkpoint.
    """
    generator = restore_generator(ckpt)
    size = ckpt.config.generator.image_size
    out = []
    with torch.no_grad():
        for tile in s1_tiles:
            if tile.data.shape[1:] != (size, size):
                raise ValueError(
                    f"tile {tile.meta.tile_id!r} is {tile.data.shape[1:]}, checkpoint "
                    f"expects {size}x{size}"
                )
            x = torch.from_numpy(normalize_s1(tile)).unsqueeze(0)
            pred = generator(x).squeeze(0).numpy()
            out.append(
                model_to_rgb(pred, tile_id=tile.meta.tile_id,
                             acquired_date=tile.meta.acquired_date)
            )
    return out
