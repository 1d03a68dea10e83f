"""Attack stage: perturbation generator, epsilon-ball projection, CTA training and baselines"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .. import config
from ..exceptions import FrozenModelError, NonFiniteError
from ..utils import attention
from ..utils.attention import AntiAttentionMap, AttentionMap
from ..utils.seeding import seed_everything, weights_hash
from .datagen_service import ImageOnlyView
from .model_service import FeatureTap, TaskModelBundle, forward_with_features, task_scalar_score

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=False),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


def _down(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1),
        nn.InstanceNorm2d(out_channels, affine=True),
        nn.ReLU(inplace=False),
    )


def _up(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(out_channels, affine=True),
        nn.ReLU(inplace=False),
    )


class PerturbationGenerator(nn.Module):
    """
    Encoder–decoder producing a perturbation bounded by ±epsilon_train

    c7s1-32, two stride-2 downsampling blocks (64, 128), residual blocks,
    two upsampling blocks, c7s1-3 with tanh scaled by epsilon_train. The last
    conv starts at zero, so a fresh generator outputs delta = 0.
    """

    def __init__(self, epsilon_train: float, n_residual: int = 4):
        super().__init__()
        if not 0 < epsilon_train < 1:
            raise ValueError(f"epsilon_train must lie in (0, 1), got {epsilon_train}")
        self.epsilon_train = float(epsilon_train)
        self.n_residual = n_residual
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, 32, kernel_size=7),
            nn.InstanceNorm2d(32, affine=True),
            nn.ReLU(inplace=False),
        )
        self.down = nn.Sequential(_down(32, 64), _down(64, 128))
        self.residual = nn.Sequential(*[ResidualBlock(128) for _ in range(n_residual)])
        self.up = nn.Sequential(_up(128, 64), _up(64, 32))
        self.out = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(32, 3, kernel_size=7))
        nn.init.zeros_(self.out[1].weight)
        nn.init.zeros_(self.out[1].bias)

    def forward(self, x):
        h = self.up(self.residual(self.down(self.stem(x))))
        return self.epsilon_train * torch.tanh(self.out(h))


def generator_forward(G: PerturbationGenerator, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    x' = x + G(x) (unbounded adversarial sample)

    Returns:
        (delta, x_prime)
    """
    batched = x.unsqueeze(0) if x.ndim == 3 else x
    if batched.ndim != 4 or batched.shape[1] != 3:
        raise ValueError(f"expected N×3×H×W images, got shape {tuple(x.shape)}")
    if batched.shape[-1] % 4 or batched.shape[-2] % 4:
        raise ValueError(f"image sides must be divisible by 4, got {tuple(batched.shape[-2:])}")
    delta = G(batched)
    if delta.shape != batched.shape:
        raise ValueError(f"generator output {tuple(delta.shape)} does not match input {tuple(batched.shape)}")
    if x.ndim == 3:
        delta = delta[0]
    return delta, x + delta


def clip_adversarial(x: torch.Tensor, x_prime: torch.Tensor, epsilon: float) -> torch.Tensor:
    """
    Project onto the epsilon-ball around x, then onto the valid range

    x_adv = min(x + eps, max(x', x - eps)), clamped to [0, 1].
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if x.shape != x_prime.shape:
        raise ValueError(f"x {tuple(x.shape)} and x_prime {tuple(x_prime.shape)} differ in shape")
    return torch.min(x + epsilon, torch.max(x_prime, x - epsilon)).clamp(0.0, 1.0)


@dataclass
class AdversarialBatch:
    clean: torch.Tensor
    adversarial: torch.Tensor
    per_image_linf: List[float]

    @classmethod
    def verified(cls, clean: torch.Tensor, adversarial: torch.Tensor, epsilon: float) -> 'AdversarialBatch':
        """Build a batch after checking the epsilon bound and the valid range"""
        clean = clean.detach()
        adversarial = adversarial.detach()
        linf = (adversarial - clean).abs().flatten(1).max(dim=1).values
        worst = float(linf.max())
        if worst > epsilon + config.LINF_TOLERANCE:
            raise ValueError(f"epsilon bound violated: L∞ {worst:.6f} > {epsilon:.6f}")
        if float(adversarial.min()) < 0 or float(adversarial.max()) > 1:
            raise ValueError("adversarial images leave the [0, 1] range")
        return cls(clean=clean, adversarial=adversarial, per_image_linf=[float(v) for v in linf])


# ---------------------------------------------------------------------------
# Attention extraction and loss
# ---------------------------------------------------------------------------

def task_attention(model: nn.Module, tap: FeatureTap, task: str, images: torch.Tensor,
                   det_threshold: float = 0.5, create_graph: bool = False) -> AttentionMap:
    """
    Normalized Grad-CAM of one task model at image resolution

    The raw map is upsampled before min–max normalization, so the result keeps
    max = 1 (or is all zero) exactly at image resolution.
    """
    if not images.requires_grad:
        images = images.detach().clone().requires_grad_(True)
    outputs, features = forward_with_features(model, tap, images)
    score = task_scalar_score(task, outputs, det_threshold)
    grads = torch.autograd.grad(score.value.sum(), features, create_graph=create_graph)[0]
    raw = attention.grad_cam(features, grads if create_graph else grads.detach())
    if not create_graph:
        raw = AttentionMap(values=raw.values.detach(), normalized=False)
    height, width = images.shape[-2:]
    return attention.normalize_map(attention.upsample_map(raw, height, width))


def image_anti_attention(bundle: TaskModelBundle, image: torch.Tensor) -> AntiAttentionMap:
    """Anti-attention of one clean 3×H×W image, as a 1×H×W map"""
    batch = image.unsqueeze(0)
    maps = [
        task_attention(bundle.task_model(task), bundle.taps[task], task, batch, bundle.det_threshold)
        for task in ('cls', 'det', 'seg')
    ]
    return attention.anti_attention(attention.co_attention(maps))


def compute_anti_attention(bundle: TaskModelBundle, images: torch.Tensor) -> AntiAttentionMap:
    """
    Anti-attention of clean images from the three source task models

    Each image goes through the models on its own, so a cached map equals
    image_anti_attention on that image bit for bit.

    Args:
        bundle: Frozen task models
        images: N×3×H×W clean images

    Returns:
        AntiAttentionMap N×H×W
    """
    maps = [
        image_anti_attention(bundle, image).values.detach()
        for image in tqdm(images, desc="anti-attention", disable=None)
    ]
    return AntiAttentionMap(torch.cat(maps))


def adversarial_attention(D: nn.Module, tap: FeatureTap, x_adv: torch.Tensor) -> AttentionMap:
    """
    Normalized Grad-CAM of D's most confident class on x_adv, image resolution

    Differentiable with respect to x_adv.
    """
    return task_attention(D, tap, 'cls', x_adv, create_graph=True)


def fused_adversarial_attention(bundle: TaskModelBundle, x_adv: torch.Tensor) -> AttentionMap:
    """D, detector and segmenter attention of x_adv fused with co_attention"""
    maps = [adversarial_attention(bundle.extractor_D, bundle.taps['D'], x_adv)]
    for task in ('det', 'seg'):
        maps.append(task_attention(bundle.task_model(task), bundle.taps[task], task, x_adv,
                                   bundle.det_threshold, create_graph=True))
    return attention.co_attention(maps)


def cta_loss(anti: AttentionMap, adv: AttentionMap) -> torch.Tensor:
    """Mean squared distance between anti-attention and adversarial attention"""
    if anti.shape != adv.shape:
        raise ValueError(f"anti {anti.shape} and adv {adv.shape} differ in shape")
    return F.mse_loss(adv.values, anti.values)


# ---------------------------------------------------------------------------
# CTA training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    mean_linf: float

    def to_dict(self) -> Dict:
        return {'epoch': self.epoch, 'mean_loss': self.mean_loss, 'mean_linf': self.mean_linf}


@dataclass
class TrainingHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    snapshot_epochs: List[int] = field(default_factory=list)
    snapshots: List[np.ndarray] = field(default_factory=list)  # per snapshot epoch: S×H×W
    snapshot_indices: List[int] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.mean_loss for r in self.epochs]

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].mean_loss if self.epochs else float('nan')


def _bundle_hashes(bundle: TaskModelBundle) -> Dict[str, str]:
    return {name: weights_hash(model) for name, model in bundle.named_models().items()}


def train_cta(images: ImageOnlyView, bundle: TaskModelBundle, attack_config: config.AttackConfig, seed: int,
              on_epoch: Optional[Callable[[EpochRecord], None]] = None,
              snapshot_images: Optional[torch.Tensor] = None, snapshot_ids: Optional[List[int]] = None
              ) -> Tuple[PerturbationGenerator, TrainingHistory]:
    """
    Train a perturbation generator that moves attention into anti-attention regions

    Only images reach this function (no labels). Anti-attention maps are
    computed once per image because the task models are frozen.

    Args:
        images: Label-free training images
        bundle: Frozen task models and extractor D
        attack_config: Epsilon, epochs, batch size and Adam settings
        seed: Seed for initialization and batch order
        on_epoch: Called with each EpochRecord
        snapshot_images: Held-out images whose adversarial attention is recorded
        snapshot_ids: Dataset ids of snapshot_images

    Returns:
        (trained generator in eval mode, per-epoch history)

    Raises:
        NonFiniteError: loss became NaN/Inf
        FrozenModelError: a task model's weights changed during training
    """
    if len(images) == 0:
        raise ValueError("train_cta needs a nonempty image set")
    if attack_config.epochs < 1:
        raise ValueError("epochs must be ≥ 1")

    before = _bundle_hashes(bundle)
    seed_everything(seed)
    generator = torch.Generator().manual_seed(seed)
    clean = images[:]
    epsilon = attack_config.epsilon

    logger.info(f"Computing anti-attention for {len(images)} images")
    anti_all = compute_anti_attention(bundle, clean)

    G = PerturbationGenerator(epsilon)
    optimizer = torch.optim.Adam(
        G.parameters(), lr=attack_config.learning_rate,
        betas=(attack_config.adam_beta1, attack_config.adam_beta2),
    )
    history = TrainingHistory()
    snapshot_x = None
    if snapshot_images is not None and attack_config.snapshot_images > 0:
        snapshot_x = snapshot_images[:attack_config.snapshot_images].detach()
        ids = snapshot_ids if snapshot_ids is not None else list(range(snapshot_x.shape[0]))
        history.snapshot_indices = [int(i) for i in ids[:snapshot_x.shape[0]]]

    G.train()
    for epoch in tqdm(range(attack_config.epochs), desc=f"train cta eps={epsilon:.4f}", disable=None):
        order = torch.randperm(len(images), generator=generator)
        losses, linfs = [], []
        for batch_idx, start in enumerate(range(0, len(images), attack_config.batch_size)):
            idx = order[start:start + attack_config.batch_size]
            x = clean[idx]
            _, x_prime = generator_forward(G, x)
            x_adv = clip_adversarial(x, x_prime, epsilon)
            if attack_config.task_adversarial_attention:
                adv_map = fused_adversarial_attention(bundle, x_adv)
            else:
                adv_map = adversarial_attention(bundle.extractor_D, bundle.taps['D'], x_adv)
            loss = cta_loss(AntiAttentionMap(anti_all.values[idx]), adv_map)
            if not torch.isfinite(loss):
                logger.error(f"Non-finite loss at epoch {epoch + 1}, batch {batch_idx}")
                raise NonFiniteError('loss', epoch + 1, batch_idx)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss) * len(idx))
            linfs.append(float((x_adv.detach() - x).abs().flatten(1).max(dim=1).values.sum()))

        record = EpochRecord(epoch=epoch + 1, mean_loss=sum(losses) / len(images), mean_linf=sum(linfs) / len(images))
        history.epochs.append(record)
        logger.info(f"[cta eps={epsilon:.4f}] epoch {record.epoch}/{attack_config.epochs} "
                    f"loss {record.mean_loss:.5f} linf {record.mean_linf:.5f}")
        if on_epoch:
            on_epoch(record)
        if snapshot_x is not None and (record.epoch % attack_config.snapshot_every == 0
                                       or record.epoch == attack_config.epochs):
            history.snapshot_epochs.append(record.epoch)
            history.snapshots.append(_snapshot(G, bundle, snapshot_x, epsilon))

    G.eval()
    for param in G.parameters():
        param.requires_grad_(False)

    after = _bundle_hashes(bundle)
    changed = [name for name in before if before[name] != after[name]]
    if changed:
        raise FrozenModelError(f"frozen model weights changed during attack training: {changed}")
    return G, history


def _snapshot(G: PerturbationGenerator, bundle: TaskModelBundle, x: torch.Tensor, epsilon: float) -> np.ndarray:
    was_training = G.training
    G.eval()
    with torch.no_grad():
        x_adv = clip_adversarial(x, x + G(x), epsilon)
    G.train(was_training)
    adv = task_attention(bundle.extractor_D, bundle.taps['D'], 'cls', x_adv)
    return adv.values.detach().cpu().numpy().astype(np.float32)


def apply_generator(G: PerturbationGenerator, x: torch.Tensor, epsilon: float, batch_size: int = 64) -> torch.Tensor:
    """Apply a trained generator to unseen images (forward passes only)"""
    outputs = []
    G.eval()
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            batch = x[start:start + batch_size]
            _, x_prime = generator_forward(G, batch)
            outputs.append(clip_adversarial(batch, x_prime, epsilon))
    return torch.cat(outputs)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def gaussian_noise_attack(x: torch.Tensor, epsilon: float, seed: int) -> torch.Tensor:
    """Additive N(0, (eps/2)²) noise projected onto the epsilon-ball"""
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype) * (epsilon / 2)
    return clip_adversarial(x, x + noise, epsilon)


def dr_attack(x: torch.Tensor, model: nn.Module, tap: FeatureTap, steps: int = 40,
              step_size: Optional[float] = None, epsilon: float = 16 / 255) -> torch.Tensor:
    """
    Dispersion reduction: descend the standard deviation of the tap features

    Each signed-gradient step is followed by the epsilon-ball projection and
    the [0,1] clamp.
    """
    if steps < 0:
        raise ValueError(f"steps must be ≥ 0, got {steps}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    step_size = epsilon / 10 if step_size is None else step_size
    x = x.detach()
    x_adv = x.clone()
    for step in range(steps):
        x_adv.requires_grad_(True)
        _, features = forward_with_features(model, tap, x_adv)
        dispersion = features.flatten(1).std(dim=1).sum()
        grad = torch.autograd.grad(dispersion, x_adv)[0]
        if not torch.isfinite(grad).all():
            logger.error(f"Non-finite DR gradient at step {step}")
            raise NonFiniteError('DR gradient', step, 0)
        with torch.no_grad():
            x_adv = clip_adversarial(x, x_adv - step_size * grad.sign(), epsilon)
    return x_adv.detach()


def feature_dispersion(model: nn.Module, tap: FeatureTap, x: torch.Tensor) -> torch.Tensor:
    """Per-image standard deviation of the tap features"""
    with torch.no_grad():
        _, features = forward_with_features(model, tap, x)
    return features.flatten(1).std(dim=1)
