"""Adversarial training loop: alternating discriminator/generator updates
with replay buffers, shared scale augmentation, loss logging, and resumable
checkpoints."""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from . import blocks, data, losses
from .augment import ReplayBuffer, ScaleAugmentConfig, sample_scale_transform
from .losses import LossWeights
from .models import (ContentDiscriminator, DomainDiscriminator, GeneratorConfig,
                     GeneratorPair, load_checkpoint, save_checkpoint)


class NumericalInstabilityError(RuntimeError):
    """A loss became non-finite; carries diagnostic tensor statistics."""

    def __init__(self, message: str, stats: dict):
        super().__init__(f"{message}; diagnostics: {json.dumps(stats, sort_keys=True)}")
        self.stats = stats


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 2e-4
    adam_betas: tuple = (0.5, 0.999)
    seed: int = 0
    mode: str = "three-class"
    patch_size: int = 256
    weights: LossWeights | None = None
    buffer_capacity: int = 50
    augment: ScaleAugmentConfig = field(default_factory=ScaleAugmentConfig)
    projection_width: int = 256
    contrastive_max_negatives: int = 256
    log_every: int = 1
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.mode not in ("three-class", "two-class"):
            raise ValueError(f"mode must be 'three-class' or 'two-class', got {self.mode!r}")
        if self.weights is None:
            self.weights = (losses.SEGMENTATION_WEIGHTS if self.mode == "three-class"
                            else losses.UNMIXING_WEIGHTS)

    @property
    def three_class(self) -> bool:
        return self.mode == "three-class"


@dataclass
class LossReport:
    adv_g: float
    adv_dd: float
    adv_dc: float
    cycle: float
    contrastive: float
    total: float
    identity: float | None = None

    def as_record(self, iteration: int) -> dict:
        record = {
            "iteration": iteration,
            "L_adv_G": self.adv_g,
            "L_adv_Dd": self.adv_dd,
            "L_adv_Dc": self.adv_dc,
            "L_cyc": self.cycle,
        }
        if self.identity is not None:
            record["L_id"] = self.identity
        record["L_cl"] = self.contrastive
        record["total"] = self.total
        return record


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _check_finite(name: str, value: torch.Tensor, context: dict) -> None:
    if torch.isfinite(value).all():
        return
    stats = {"loss": name, "value": float(value.detach())}
    for key, t in context.items():
        t = t.detach()
        stats[key] = {"min": float(t.min()), "max": float(t.max()),
                      "mean": float(t.mean()), "shape": list(t.shape)}
    raise NumericalInstabilityError(f"non-finite loss {name!r}", stats)


class Trainer:
    """Owns all mutable training state: the generator pair, both
    discriminators, the contrastive projection head, optimizers, replay
    buffers, and the RNG streams for augmentation and negative sampling."""

    def __init__(self, model_cfg: GeneratorConfig, cfg: TrainConfig,
                 median_a=None, median_b=None):
        if cfg.three_class and model_cfg.channels_a != model_cfg.channels_b:
            raise ValueError(
                "three-class mode needs equal channel counts for identity pairs; "
                "use two-class mode")
        self.model_cfg = model_cfg
        self.cfg = cfg
        seed = cfg.seed
        self.generators = GeneratorPair(model_cfg).init_parameters(
            seed, median_a, median_b)
        self.d_domain = DomainDiscriminator(
            model_cfg.channels_a + model_cfg.channels_b, three_class=cfg.three_class)
        self.d_content = ContentDiscriminator(model_cfg.bottleneck_width)
        self.projection = losses.ContrastiveProjection(
            model_cfg.bottleneck_width, cfg.projection_width)
        blocks.init_parameters(self.d_domain, seed + 1)
        blocks.init_parameters(self.d_content, seed + 2)
        blocks.init_parameters(self.projection, seed + 3)

        self.opt_g = torch.optim.Adam(
            list(self.generators.parameters()) + list(self.projection.parameters()),
            lr=cfg.lr, betas=cfg.adam_betas)
        self.opt_d = torch.optim.Adam(
            list(self.d_domain.parameters()) + list(self.d_content.parameters()),
            lr=cfg.lr, betas=cfg.adam_betas)

        self.rng = torch.Generator().manual_seed(seed + 10)
        self.buffers = {
            name: ReplayBuffer(cfg.buffer_capacity,
                               torch.Generator().manual_seed(seed + 20 + i))
            for i, name in enumerate(("fake_a", "fake_b", "feat_a", "feat_b"))
        }
        self.iteration = 0

    # -- one optimization step -------------------------------------------

    def train_step(self, x, y, x1, y1) -> LossReport:
        """One alternating update on an unpaired sample (x in A, y in B) with
        extra images x1/y1 supplying contrastive negatives."""
        cfg = self.cfg
        three = cfg.three_class

        # Generator passes: fakes, cycles, optional identities, bottlenecks.
        fake_b, z_x = self.generators.translate(x, "ab")
        fake_a, z_y = self.generators.translate(y, "ba")
        x_cyc, z_fake_b = self.generators.translate(fake_b, "ba")
        y_cyc, z_fake_a = self.generators.translate(fake_a, "ab")
        if three:
            identity_a, _ = self.generators.translate(x, "ba")
            identity_b, _ = self.generators.translate(y, "ab")
        z_x1 = self.generators.bottleneck_features(x1, "a")
        z_y1 = self.generators.bottleneck_features(y1, "b")

        # One scale transform per iteration, shared by every adversarial
        # image evaluation so stacked pairs stay aligned.
        transform = sample_scale_transform(cfg.augment, self.rng)

        # Discriminator step (generator outputs detached).
        _set_requires_grad(self.d_domain, True)
        _set_requires_grad(self.d_content, True)
        self.opt_d.zero_grad()

        _, buf_fake_a = self.buffers["fake_a"].push_sample(fake_a)
        _, buf_fake_b = self.buffers["fake_b"].push_sample(fake_b)
        fake_a_batch = torch.cat([fake_a.detach(), buf_fake_a], dim=0)
        fake_b_batch = torch.cat([fake_b.detach(), buf_fake_b], dim=0)

        pairs = [torch.cat([transform(x), transform(y)], dim=1),
                 torch.cat([transform(fake_a_batch), transform(fake_b_batch)], dim=1)]
        split = [1, fake_a_batch.shape[0]]
        if three:
            pairs.append(torch.cat([transform(x), transform(identity_a.detach())], dim=1))
            pairs.append(torch.cat([transform(y), transform(identity_b.detach())], dim=1))
            split += [1, 1]
        outs = torch.split(self.d_domain(torch.cat(pairs, dim=0)), split)
        loss_dd = losses.adv_loss_domain_disc(
            outs[0], outs[1],
            identity_a=outs[2] if three else None,
            identity_b=outs[3] if three else None,
            three_class=three)

        _, buf_feat_a = self.buffers["feat_a"].push_sample(z_x)
        _, buf_feat_b = self.buffers["feat_b"].push_sample(z_y)
        feats = torch.cat([z_x.detach(), buf_feat_a, z_y.detach(), buf_feat_b], dim=0)
        score_a, score_b = torch.split(self.d_content(feats), 2)
        loss_dc = losses.adv_loss_content_disc(score_a, score_b)

        diag = {"fake_a": fake_a, "fake_b": fake_b}
        _check_finite("L_adv_Dd", loss_dd, diag)
        _check_finite("L_adv_Dc", loss_dc, diag)
        (loss_dd + loss_dc).backward()
        self.opt_d.step()

        # Generator step (discriminators frozen).
        _set_requires_grad(self.d_domain, False)
        _set_requires_grad(self.d_content, False)
        self.opt_g.zero_grad()

        g_pairs = [torch.cat([transform(fake_a), transform(fake_b)], dim=1)]
        g_split = [1]
        if three:
            g_pairs.append(torch.cat([transform(x), transform(identity_a)], dim=1))
            g_pairs.append(torch.cat([transform(y), transform(identity_b)], dim=1))
            g_split += [1, 1]
        g_outs = torch.split(self.d_domain(torch.cat(g_pairs, dim=0)), g_split)
        score_a_g, score_b_g = torch.split(
            self.d_content(torch.cat([z_x, z_y], dim=0)), 1)
        adv_g = losses.adv_loss_generators(
            g_outs[0], score_a_g, score_b_g,
            identity_a=g_outs[1] if three else None,
            identity_b=g_outs[2] if three else None,
            three_class=three)

        cyc = losses.cycle_loss(x, y, x_cyc, y_cyc)
        ident = losses.identity_loss(x, identity_a, y, identity_b) if three else None

        projected = {
            "x": self.projection(z_x),
            "y": self.projection(z_y),
            "x1": self.projection(z_x1),
            "y1": self.projection(z_y1),
            "fake_a": self.projection(z_fake_a),
            "fake_b": self.projection(z_fake_b),
        }
        if three:
            projected["identity_a"] = self.projection(
                self.generators.bottleneck_features(identity_a, "a"))
        contrast = losses.contrastive_total(
            projected, cfg.weights.tau,
            max_negatives=cfg.contrastive_max_negatives, generator=self.rng)

        total = losses.total_loss(adv_g, cyc, ident, contrast, cfg.weights)
        for name, value in (("L_adv_G", adv_g), ("L_cyc", cyc), ("L_cl", contrast),
                            ("L_id", ident), ("total", total)):
            if value is not None:
                _check_finite(name, value, diag)
        total.backward()
        self.opt_g.step()
        _set_requires_grad(self.d_domain, True)
        _set_requires_grad(self.d_content, True)

        self.iteration += 1
        return LossReport(
            adv_g=adv_g.detach().item(), adv_dd=loss_dd.detach().item(),
            adv_dc=loss_dc.detach().item(), cycle=cyc.detach().item(),
            contrastive=contrast.detach().item(), total=total.detach().item(),
            identity=ident.detach().item() if ident is not None else None)

    # -- state serialization ----------------------------------------------

    def named_tensors(self) -> dict:
        out = {}
        for prefix, module in (("generator", self.generators),
                               ("domain_disc", self.d_domain),
                               ("content_disc", self.d_content),
                               ("projection", self.projection)):
            for key, value in module.state_dict().items():
                out[f"{prefix}.{key}"] = value.clone()
        return out

    def load_named_tensors(self, tensors: dict) -> None:
        groups = {"generator": {}, "domain_disc": {}, "content_disc": {}, "projection": {}}
        for key, value in tensors.items():
            prefix, _, rest = key.partition(".")
            groups[prefix][rest] = value
        self.generators.load_state_dict(groups["generator"])
        self.d_domain.load_state_dict(groups["domain_disc"])
        self.d_content.load_state_dict(groups["content_disc"])
        self.projection.load_state_dict(groups["projection"])

    def extra_state(self) -> dict:
        return {
            "optimizer_g": self.opt_g.state_dict(),
            "optimizer_d": self.opt_d.state_dict(),
            "buffers": {k: b.state_dict() for k, b in self.buffers.items()},
            "rng_state": self.rng.get_state(),
            "iteration": self.iteration,
        }

    def load_extra_state(self, extra: dict) -> None:
        self.opt_g.load_state_dict(extra["optimizer_g"])
        self.opt_d.load_state_dict(extra["optimizer_d"])
        for k, b in self.buffers.items():
            b.load_state_dict(extra["buffers"][k])
        self.rng.set_state(extra["rng_state"])
        self.iteration = extra["iteration"]


def config_metadata(model_cfg: GeneratorConfig, cfg: TrainConfig) -> dict:
    config = {"model": asdict(model_cfg), "train": asdict(cfg)}
    blob = json.dumps(config, sort_keys=True, default=str)
    return {
        "config": config,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": cfg.seed,
    }


def model_config_from_metadata(metadata: dict) -> GeneratorConfig:
    raw = dict(metadata["config"]["model"])
    raw["attention_levels"] = tuple(raw["attention_levels"])
    return GeneratorConfig(**raw)


def write_checkpoint(path, trainer: Trainer, stream_states: dict | None = None) -> None:
    metadata = config_metadata(trainer.model_cfg, trainer.cfg)
    metadata["iteration"] = trainer.iteration
    extra = trainer.extra_state()
    if stream_states:
        extra["streams"] = stream_states
    save_checkpoint(path, trainer.named_tensors(), metadata, extra)


def train(model_cfg: GeneratorConfig, cfg: TrainConfig, domain_a_dir, domain_b_dir,
          out_dir, resize_to=None, resume_from=None) -> Path:
    """Run the full training protocol over two unpaired domain directories.

    Writes ``checkpoint-<iteration>.pt`` files and an append-only JSONL loss
    log under ``out_dir``; returns the final checkpoint path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream_a = data.PatchStream(domain_a_dir, cfg.patch_size, cfg.seed + 1,
                                resize_to=resize_to)
    stream_b = data.PatchStream(domain_b_dir, cfg.patch_size, cfg.seed + 2,
                                resize_to=resize_to)
    trainer = Trainer(
        model_cfg, cfg,
        median_a=data.domain_median(domain_a_dir, resize_to=resize_to),
        median_b=data.domain_median(domain_b_dir, resize_to=resize_to))
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        trainer.load_named_tensors(payload["tensors"])
        trainer.load_extra_state(payload["extra"])
        streams = payload["extra"].get("streams")
        if streams:
            stream_a.load_state_dict(streams["a"])
            stream_b.load_state_dict(streams["b"])

    log_path = out / "loss_log.jsonl"
    with open(log_path, "a") as log:
        while trainer.iteration < cfg.iterations:
            x = next(stream_a).unsqueeze(0)
            x1 = next(stream_a).unsqueeze(0)
            y = next(stream_b).unsqueeze(0)
            y1 = next(stream_b).unsqueeze(0)
            report = trainer.train_step(x, y, x1, y1)
            if trainer.iteration % cfg.log_every == 0 or trainer.iteration == cfg.iterations:
                log.write(json.dumps(report.as_record(trainer.iteration)) + "\n")
                log.flush()
            if (trainer.iteration % cfg.checkpoint_every == 0
                    and trainer.iteration < cfg.iterations):
                write_checkpoint(out / f"checkpoint-{trainer.iteration}.pt", trainer,
                                 {"a": stream_a.state_dict(), "b": stream_b.state_dict()})
    final = out / f"checkpoint-{trainer.iteration}.pt"
    write_checkpoint(final, trainer,
                     {"a": stream_a.state_dict(), "b": stream_b.state_dict()})
    return final


def load_generators(checkpoint_path) -> tuple[GeneratorPair, dict]:
    payload = load_checkpoint(checkpoint_path)
    model_cfg = model_config_from_metadata(payload["metadata"])
    pair = GeneratorPair(model_cfg)
    groups = {}
    for key, value in payload["tensors"].items():
        prefix, _, rest = key.partition(".")
        if prefix == "generator":
            groups[rest] = value
    pair.load_state_dict(groups)
    pair.eval()
    return pair, payload["metadata"]


def translate(checkpoint_path, images, direction: str) -> list:
    """Translate a batch of [-1, 1] images with a trained checkpoint,
    mirror-padding to the required divisibility and cropping back."""
    pair, _ = load_generators(checkpoint_path)
    factor = 2 ** pair.cfg.levels
    outputs = []
    with torch.no_grad():
        for image in images:
            batch = image.unsqueeze(0) if image.ndim == 3 else image
            padded, record = data.pad_to_divisible(batch, factor)
            translated, _ = pair.translate(padded, direction)
            outputs.append(data.unpad(translated, record).squeeze(0))
    return outputs
