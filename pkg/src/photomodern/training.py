"""Three-stage training: backbone autoencoder, style predictor, merger.

Stage 1 trains the encoder-decoder as an autoencoder (pixel L1 + feature
L2).  Stage 2 trains the style predictor on single-reference synthetic
samples with the backbone frozen.  Stage 3 trains the merging-refinement
subnet (plus a patch discriminator) on multi-reference samples with both
earlier groups frozen; the learning rate decays linearly to zero across
the final epoch.

Determinism contract: a (config, seed, corpus) triple fixes the whole
trajectory.  Sample draws are keyed by the global sample index, torch RNG
state is checkpointed, so resuming reproduces an uninterrupted run
bit-for-bit on a deterministic backend.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import datagen
from .backbone import PSTNet, load_checkpoint, save_checkpoint, split_input
from .degradations import DEGRADATION_REGISTRY, degrade_blur
from .imageops import to_tensor
from .losses import (
    LossWeights,
    PatchDiscriminator,
    l1_loss,
    make_extractor,
    stage2_loss,
    stage3_loss,
)
from .merger import ModernizerNet, unet_depth_for
from .seeds import derive_seed, make_rng
from .stylecode import StylePredictor, stylize_single_t

ADAM_BETAS = (0.9, 0.999)
STAGE_EPOCHS = {1: 5, 2: 2, 3: 3}


@dataclass
class TrainConfig:
    stage: int = 1
    corpus: str = ""
    out_dir: str = "runs"
    epochs: int | None = None            # default depends on the stage
    steps_per_epoch: int | None = None   # default: one pass over the corpus
    learning_rate: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    image_size: int = 64
    n_refs: int = 2
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    unet_dropout: float = 0.0
    disc_layers: int | None = None       # default: 2 below 128 px, else 3
    grad_clip: float = 10.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    perceptual_weights: str | None = None
    extractor_seed: int = 0
    blur_sigma_mode: str = "fraction"
    log_every: int = 25
    save_every: int | None = None        # steps; None saves only at the end

    def resolved_epochs(self) -> int:
        return self.epochs if self.epochs is not None else STAGE_EPOCHS[self.stage]

    def resolved_disc_layers(self) -> int:
        if self.disc_layers is not None:
            return self.disc_layers
        return 2 if self.image_size < 128 else 3

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["unet_depth"] = unet_depth_for(self.image_size)
        return d


# ---------------------------------------------------------------------------
# config file (flat key = value lines)

_CONFIG_KEYS = {
    "stage": int, "corpus": str, "out_dir": str, "epochs": int,
    "steps_per_epoch": int, "learning_rate": float, "batch_size": int,
    "seed": int, "image_size": int, "n_refs": int, "unet_dropout": float,
    "disc_layers": int, "grad_clip": float, "perceptual.weights": str,
    "extractor_seed": int, "blur_sigma_mode": str, "log_every": int,
    "save_every": int, "widths": str,
    "lambda_ml": float, "lambda_p": float, "lambda_cx": float,
    "lambda_l1": float, "lambda_sm": float, "lambda_adv": float,
}

_LAMBDA_FIELDS = {"lambda_ml": "masked", "lambda_p": "perceptual",
                  "lambda_cx": "contextual", "lambda_l1": "l1",
                  "lambda_sm": "smooth", "lambda_adv": "adv"}


def parse_config(path) -> TrainConfig:
    """Read a flat `key = value` config file (''#'' comments allowed)."""
    cfg = TrainConfig()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            parsed = _CONFIG_KEYS[key](value)
            if key in _LAMBDA_FIELDS:
                setattr(cfg.loss_weights, _LAMBDA_FIELDS[key], parsed)
            elif key == "widths":
                cfg.widths = tuple(int(v) for v in value.split(","))
            elif key == "perceptual.weights":
                cfg.perceptual_weights = parsed
            else:
                setattr(cfg, key, parsed)
    return cfg


# ---------------------------------------------------------------------------
# helpers

def state_hash(module: torch.nn.Module) -> str:
    """Order-stable digest of all parameters and buffers (bitwise)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _freeze(module: torch.nn.Module) -> str:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return state_hash(module)


def _check_frozen(module: torch.nn.Module, before: str, what: str) -> None:
    if state_hash(module) != before:
        raise RuntimeError(f"frozen {what} weights changed during training")


def _svt_for(cfg: TrainConfig):
    if cfg.blur_sigma_mode == "fraction":
        return datagen.apply_svt
    registry = dict(DEGRADATION_REGISTRY)
    registry["blur"] = functools.partial(degrade_blur, sigma_mode=cfg.blur_sigma_mode)
    return functools.partial(datagen.apply_svt, registry=registry)


class _RunLog:
    def __init__(self, path, columns: list[str]):
        self.path = path
        self.columns = columns
        exists = os.path.exists(path)
        self._fh = open(path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if not exists:
            self._writer.writerow(columns)

    def write(self, values: dict) -> None:
        self._writer.writerow([values.get(c, "") for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _require_finite(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss at step {step}")


def _rng_payload() -> dict:
    return {"torch": torch.get_rng_state()}


def _restore_rng(payload: dict | None) -> None:
    if payload and "torch" in payload:
        torch.set_rng_state(payload["torch"])


def _stage_lr(cfg: TrainConfig, epoch: int, step_in_epoch: int, steps_per_epoch: int,
              decay_final_epoch: bool) -> float:
    if not decay_final_epoch or epoch < cfg.resolved_epochs() - 1:
        return cfg.learning_rate
    frac = (step_in_epoch + 1) / steps_per_epoch
    return cfg.learning_rate * max(0.0, 1.0 - frac)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# generic loop

def _run_loop(cfg: TrainConfig, *, stage: str, compute: "callable",
              optimizers: list[torch.optim.Optimizer], log: _RunLog,
              save_state: "callable", start_epoch: int = 0, start_step: int = 0,
              steps_per_epoch: int, decay_final_epoch: bool = False) -> None:
    """Shared epoch/step loop with per-step seeding, clipping and checkpoints."""
    epochs = cfg.resolved_epochs()
    epoch, step = start_epoch, start_step
    while epoch < epochs:
        while step < steps_per_epoch:
            global_step = epoch * steps_per_epoch + step
            lr = _stage_lr(cfg, epoch, step, steps_per_epoch, decay_final_epoch)
            for opt in optimizers:
                _set_lr(opt, lr)
            values = compute(global_step)
            values.update({"step": global_step, "epoch": epoch, "lr": lr})
            if global_step % cfg.log_every == 0 or step == steps_per_epoch - 1:
                log.write(values)
            step += 1
            if cfg.save_every and (global_step + 1) % cfg.save_every == 0:
                save_state(epoch, step, final=False)
        step = 0
        epoch += 1
    save_state(epoch, 0, final=True)


def _sample_batch(cfg: TrainConfig, corpus: datagen.Corpus, global_step: int,
                  kind: str, n_refs: int, svt) -> list:
    samples = []
    for j in range(cfg.batch_size):
        seed = derive_seed(cfg.seed, global_step * cfg.batch_size + j)
        item, _ = datagen.draw_sample_from_corpus(corpus, n_refs, seed, kind=kind, svt=svt)
        samples.append(item)
    return samples


# ---------------------------------------------------------------------------
# stage 1: backbone autoencoder

def train_stage1(cfg: TrainConfig, resume: str | None = None) -> str:
    """Train encoder+decoder for reconstruction; returns the checkpoint path."""
    if cfg.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    corpus = datagen.Corpus(cfg.corpus, size=cfg.image_size)
    os.makedirs(cfg.out_dir, exist_ok=True)
    torch.manual_seed(cfg.seed)
    net = PSTNet(cfg.widths)
    extractor = make_extractor(cfg.perceptual_weights, cfg.extractor_seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS)
    steps_per_epoch = cfg.steps_per_epoch or len(corpus)
    start_epoch = start_step = 0
    if resume:
        payload = load_checkpoint(resume)
        net.load_state_dict(payload["weights"]["backbone"])
        opt.load_state_dict(payload["optimizer_state"]["g"])
        _restore_rng(payload["rng_state"])
        start_epoch, start_step = payload["epoch"], payload["step"]

    ckpt_path = os.path.join(cfg.out_dir, "stage1.pt")

    def save_state(epoch, step, final):
        path = ckpt_path if final else os.path.join(cfg.out_dir, f"stage1_e{epoch}s{step}.pt")
        save_checkpoint(path, stage="stage1", weights={"backbone": net.state_dict()},
                        config=cfg.snapshot(), epoch=epoch, step=step,
                        optimizer_state={"g": opt.state_dict()}, rng_state=_rng_payload())

    def compute(global_step):
        total = None
        parts = {"l1": 0.0, "feature": 0.0}
        for j in range(cfg.batch_size):
            seed = derive_seed(cfg.seed, global_step * cfg.batch_size + j)
            rng = make_rng(seed)
            img, _ = corpus.load_index(int(rng.integers(len(corpus))))
            x, high = split_input(img)
            out = net.decode(net.encode(x), high=high).image
            pix = l1_loss(out, x)
            with torch.no_grad():
                target_feat = extractor(x)["relu4_1"]
            feat = torch.nn.functional.mse_loss(extractor(out)["relu4_1"], target_feat)
            loss = pix + feat
            parts["l1"] += float(pix.detach()) / cfg.batch_size
            parts["feature"] += float(feat.detach()) / cfg.batch_size
            total = loss if total is None else total + loss
        total = total / cfg.batch_size
        _require_finite(total, global_step)
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        return {"total": float(total.detach()), **parts}

    log = _RunLog(os.path.join(cfg.out_dir, "stage1_log.csv"),
                  ["step", "epoch", "lr", "total", "l1", "feature"])
    try:
        _run_loop(cfg, stage="stage1", compute=compute, optimizers=[opt], log=log,
                  save_state=save_state, start_epoch=start_epoch, start_step=start_step,
                  steps_per_epoch=steps_per_epoch)
    finally:
        log.close()
    return ckpt_path


# ---------------------------------------------------------------------------
# stage 2: style predictor on single-reference samples

def train_stage2(cfg: TrainConfig, stage1_ckpt: str, resume: str | None = None) -> str:
    payload1 = load_checkpoint(stage1_ckpt)
    if payload1["stage"] != "stage1":
        raise ValueError(f"expected a stage1 checkpoint, got {payload1['stage']}")
    corpus = datagen.Corpus(cfg.corpus, size=cfg.image_size)
    os.makedirs(cfg.out_dir, exist_ok=True)
    torch.manual_seed(cfg.seed + 1)
    net = PSTNet(cfg.widths)
    net.load_state_dict(payload1["weights"]["backbone"])
    backbone_hash = _freeze(net)
    predictor = StylePredictor(cfg.widths)
    extractor = make_extractor(cfg.perceptual_weights, cfg.extractor_seed)
    opt = torch.optim.Adam(predictor.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS)
    steps_per_epoch = cfg.steps_per_epoch or len(corpus)
    svt = _svt_for(cfg)
    start_epoch = start_step = 0
    if resume:
        payload = load_checkpoint(resume)
        predictor.load_state_dict(payload["weights"]["stylecode"])
        opt.load_state_dict(payload["optimizer_state"]["g"])
        _restore_rng(payload["rng_state"])
        start_epoch, start_step = payload["epoch"], payload["step"]

    ckpt_path = os.path.join(cfg.out_dir, "stage2.pt")

    def save_state(epoch, step, final):
        path = ckpt_path if final else os.path.join(cfg.out_dir, f"stage2_e{epoch}s{step}.pt")
        save_checkpoint(path, stage="stage2",
                        weights={"backbone": net.state_dict(),
                                 "stylecode": predictor.state_dict()},
                        config=cfg.snapshot(), epoch=epoch, step=step,
                        optimizer_state={"g": opt.state_dict()}, rng_state=_rng_payload())

    def compute(global_step):
        samples = _sample_batch(cfg, corpus, global_step, "train", 1, svt)
        total = None
        parts = {"masked_l1": 0.0, "perceptual": 0.0, "contextual": 0.0}
        for sample in samples:
            c_t, c_high = split_input(sample.content)
            s_t = to_tensor(sample.refs[0])
            gt_t = to_tensor(sample.gt)
            mask_t = torch.from_numpy(sample.masks[0].astype(np.float32))
            result = stylize_single_t(net, predictor, c_t, c_high, s_t)
            loss, p = stage2_loss(result.image, gt_t, mask_t, cfg.loss_weights, extractor)
            for k in parts:
                parts[k] += p[k] / cfg.batch_size
            total = loss if total is None else total + loss
        total = total / cfg.batch_size
        _require_finite(total, global_step)
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(predictor.parameters(), cfg.grad_clip)
        opt.step()
        return {"total": float(total.detach()), **parts}

    log = _RunLog(os.path.join(cfg.out_dir, "stage2_log.csv"),
                  ["step", "epoch", "lr", "total", "masked_l1", "perceptual", "contextual"])
    try:
        _run_loop(cfg, stage="stage2", compute=compute, optimizers=[opt], log=log,
                  save_state=save_state, start_epoch=start_epoch, start_step=start_step,
                  steps_per_epoch=steps_per_epoch)
    finally:
        log.close()
    _check_frozen(net, backbone_hash, "backbone")
    return ckpt_path


# ---------------------------------------------------------------------------
# stage 3: merging-refinement subnet + discriminator

def train_stage3(cfg: TrainConfig, stage2_ckpt: str, resume: str | None = None) -> str:
    payload2 = load_checkpoint(stage2_ckpt)
    if payload2["stage"] != "stage2":
        raise ValueError(f"expected a stage2 checkpoint, got {payload2['stage']}")
    corpus = datagen.Corpus(cfg.corpus, size=cfg.image_size)
    os.makedirs(cfg.out_dir, exist_ok=True)
    torch.manual_seed(cfg.seed + 2)
    pst = PSTNet(cfg.widths)
    pst.load_state_dict(payload2["weights"]["backbone"])
    predictor = StylePredictor(cfg.widths)
    predictor.load_state_dict(payload2["weights"]["stylecode"])
    backbone_hash = _freeze(pst)
    predictor_hash = _freeze(predictor)
    net = ModernizerNet(pst, predictor, unet_depth=unet_depth_for(cfg.image_size),
                        unet_dropout=cfg.unet_dropout)
    disc = PatchDiscriminator(n_layers=cfg.resolved_disc_layers())
    extractor = make_extractor(cfg.perceptual_weights, cfg.extractor_seed)
    merger_params = (list(net.attention.parameters()) + list(net.merge_head.parameters())
                     + list(net.refiner.parameters()))
    opt_g = torch.optim.Adam(merger_params, lr=cfg.learning_rate, betas=ADAM_BETAS)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS)
    steps_per_epoch = cfg.steps_per_epoch or len(corpus)
    svt = _svt_for(cfg)
    start_epoch = start_step = 0
    if resume:
        payload = load_checkpoint(resume)
        net.attention.load_state_dict(payload["weights"]["attention"])
        net.merge_head.load_state_dict(payload["weights"]["merge_head"])
        net.refiner.load_state_dict(payload["weights"]["refiner"])
        disc.load_state_dict(payload["weights"]["discriminator"])
        opt_g.load_state_dict(payload["optimizer_state"]["g"])
        opt_d.load_state_dict(payload["optimizer_state"]["d"])
        _restore_rng(payload["rng_state"])
        start_epoch, start_step = payload["epoch"], payload["step"]

    ckpt_path = os.path.join(cfg.out_dir, "stage3.pt")

    def save_state(epoch, step, final):
        path = ckpt_path if final else os.path.join(cfg.out_dir, f"stage3_e{epoch}s{step}.pt")
        save_checkpoint(path, stage="stage3",
                        weights={"backbone": pst.state_dict(),
                                 "stylecode": predictor.state_dict(),
                                 "attention": net.attention.state_dict(),
                                 "merge_head": net.merge_head.state_dict(),
                                 "refiner": net.refiner.state_dict(),
                                 "discriminator": disc.state_dict()},
                        config=cfg.snapshot(), epoch=epoch, step=step,
                        optimizer_state={"g": opt_g.state_dict(), "d": opt_d.state_dict()},
                        rng_state=_rng_payload())

    def compute(global_step):
        samples = _sample_batch(cfg, corpus, global_step, "train", cfg.n_refs, svt)
        g_total = None
        d_total = None
        parts = {"l1": 0.0, "perceptual": 0.0, "smooth": 0.0, "adv": 0.0}
        for sample in samples:
            c_t, c_high = split_input(sample.content)
            refs_t = [to_tensor(r) for r in sample.refs]
            gt_t = to_tensor(sample.gt)
            result = net.modernize_t(c_t, c_high, refs_t)
            loss_g, loss_d, p = stage3_loss(result.image, gt_t, cfg.loss_weights,
                                            extractor, disc)
            for k in parts:
                parts[k] += p[k] / cfg.batch_size
            g_total = loss_g if g_total is None else g_total + loss_g
            d_total = loss_d if d_total is None else d_total + loss_d
        g_total = g_total / cfg.batch_size
        d_total = d_total / cfg.batch_size
        _require_finite(g_total, global_step)
        _require_finite(d_total, global_step)
        opt_g.zero_grad()
        g_total.backward()
        torch.nn.utils.clip_grad_norm_(merger_params, cfg.grad_clip)
        opt_g.step()
        # discriminator updates after the generator, once per iteration
        opt_d.zero_grad()
        d_total.backward()
        torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
        opt_d.step()
        return {"total": float(g_total.detach()), "d_loss": float(d_total.detach()), **parts}

    log = _RunLog(os.path.join(cfg.out_dir, "stage3_log.csv"),
                  ["step", "epoch", "lr", "total", "l1", "perceptual", "smooth", "adv",
                   "d_loss"])
    try:
        _run_loop(cfg, stage="stage3", compute=compute, optimizers=[opt_g, opt_d], log=log,
                  save_state=save_state, start_epoch=start_epoch, start_step=start_step,
                  steps_per_epoch=steps_per_epoch, decay_final_epoch=True)
    finally:
        log.close()
    _check_frozen(pst, backbone_hash, "backbone")
    _check_frozen(predictor, predictor_hash, "style predictor")
    return ckpt_path


def train(cfg: TrainConfig, prev_ckpt: str | None = None, resume: str | None = None) -> str:
    """Dispatch on cfg.stage; stages 2 and 3 need the previous stage's checkpoint."""
    if cfg.stage == 1:
        return train_stage1(cfg, resume=resume)
    if prev_ckpt is None:
        raise ValueError(f"stage {cfg.stage} training needs a stage {cfg.stage - 1} checkpoint")
    if cfg.stage == 2:
        return train_stage2(cfg, prev_ckpt, resume=resume)
    if cfg.stage == 3:
        return train_stage3(cfg, prev_ckpt, resume=resume)
    raise ValueError(f"unknown stage {cfg.stage}")


# ---------------------------------------------------------------------------
# inference model loading

def load_modernizer(ckpt_path) -> ModernizerNet:
    """Rebuild the full inference network from a stage-3 checkpoint."""
    payload = load_checkpoint(ckpt_path)
    if payload["stage"] != "stage3":
        raise ValueError(f"modernization needs a stage3 checkpoint, got {payload['stage']}")
    cfg = payload["config"]
    pst = PSTNet(tuple(cfg["widths"]))
    pst.load_state_dict(payload["weights"]["backbone"])
    predictor = StylePredictor(tuple(cfg["widths"]))
    predictor.load_state_dict(payload["weights"]["stylecode"])
    net = ModernizerNet(pst, predictor, unet_depth=cfg["unet_depth"],
                        unet_dropout=cfg.get("unet_dropout", 0.0))
    net.attention.load_state_dict(payload["weights"]["attention"])
    net.merge_head.load_state_dict(payload["weights"]["merge_head"])
    net.refiner.load_state_dict(payload["weights"]["refiner"])
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net
