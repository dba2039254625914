"""scikit-learn style wrappers around the functional core.

Constructor arguments are plain hyperparameters (so ``get_params`` /
``set_params`` / ``clone`` work); fitted state lives in trailing-underscore
attributes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from probekit import augment, detector as det, diffusion, metrics, probe
from probekit.seeding import derive_seed
from probekit.toydata import SplitDataset
from probekit.validation import check_binary_labels, check_class_ids, check_images


class DiffusionGenerator(BaseEstimator):
    """Class-conditional MLP denoiser sampled with DDIM and classifier-free guidance."""

    def __init__(
        self,
        T=35,
        beta_start=1e-4,
        beta_end=0.25,
        eta=0.0,
        width=128,
        steps=3000,
        lr=2e-3,
        batch=128,
        cond_drop=0.1,
        data_var=0.01,
        guidance=2.0,
        random_state=0,
    ):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.eta = eta
        self.width = width
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.cond_drop = cond_drop
        self.data_var = data_var
        self.guidance = guidance
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_class_ids(y, len(X))
        self.schedule_ = diffusion.make_schedule(self.T, self.beta_start, self.beta_end, self.eta)
        ds = SplitDataset(X, y, np.zeros(len(X)), ["real"] * len(X))
        cfg = diffusion.DenoiserTrainConfig(
            steps=self.steps, lr=self.lr, batch=self.batch, cond_drop=self.cond_drop,
            seed=self.random_state, data_var=self.data_var,
        )
        self.net_, self.loss_curve_ = diffusion.train_denoiser(ds, self.schedule_, cfg, width=self.width)
        self.n_classes_ = self.net_.n_classes
        return self

    def sample(self, class_ids, seeds=None, lora=None):
        """Images (N, H, W) for the given classes; ``seeds`` default to 0..N-1."""
        check_is_fitted(self, "net_")
        class_ids = check_class_ids(class_ids, len(np.atleast_1d(class_ids)), self.n_classes_)
        seeds = np.arange(len(class_ids)) if seeds is None else np.asarray(seeds)
        return diffusion.generate_images(self.net_, self.schedule_, class_ids, seeds, self.guidance, lora)


class FakeImageDetector(ClassifierMixin, BaseEstimator):
    """Small conv detector; class 1 is fake and ``predict_proba[:, 1]`` is p_fake."""

    def __init__(
        self,
        channels=(8, 16),
        lr=3e-3,
        weight_decay=1e-4,
        batch=64,
        max_epochs=60,
        patience=5,
        val_fraction=0.1,
        augment_policy=None,
        patched=True,
        random_state=0,
    ):
        self.channels = channels
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch = batch
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.augment_policy = augment_policy
        self.patched = patched
        self.random_state = random_state

    def _config(self, cls=det.DetectorTrainConfig, **kw):
        policy = augment.AugmentPolicy() if self.augment_policy is None else self.augment_policy
        return cls(
            lr=kw.pop("lr", self.lr), weight_decay=self.weight_decay, batch=self.batch,
            max_epochs=kw.pop("max_epochs", self.max_epochs), patience=self.patience,
            val_fraction=self.val_fraction, seed=self.random_state, policy=policy, **kw,
        )

    @staticmethod
    def _split(X, y):
        real = np.flatnonzero(y == 0)
        fake = np.flatnonzero(y == 1)
        mk = lambda idx, lab, tag: SplitDataset(X[idx], np.zeros(len(idx)), np.full(len(idx), lab), [tag] * len(idx))
        return mk(real, 0, "real"), mk(fake, 1, "gen_base")

    def fit(self, X, y):
        X = check_images(X)
        y = check_binary_labels(y, len(X))
        real, fake = self._split(X, y)
        net = det.DetectorNet(X.shape[1], seed=self.random_state, channels=tuple(self.channels))
        self.net_, self.training_log_ = det.pretrain(real, fake, self._config(), net)
        self.classes_ = np.array([0, 1])
        return self

    def finetune(self, X_pre, y_pre, X_probe, y_probe, w=0.5, lr=3e-4, max_epochs=10):
        """Mixed-loss fine-tuning: ``(1 - w)`` on the pre-training pool, ``w`` on probe pairs."""
        check_is_fitted(self, "net_")
        X_pre, X_probe = check_images(X_pre), check_images(X_probe)
        y_pre = check_binary_labels(y_pre, len(X_pre))
        y_probe = check_binary_labels(y_probe, len(X_probe))
        real, fake = self._split(X_pre, y_pre)
        p_real, p_fake = self._split(X_probe, y_probe)
        p_fake.source_tags = ["probe"] * len(p_fake)
        paired = SplitDataset.concat([p_fake, p_real])
        cfg = self._config(det.MixConfig, lr=lr, max_epochs=max_epochs, w=w)
        self.net_, self.finetune_log_ = det.finetune_mixed(self.net_, real, fake, paired, cfg)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X)
        if self.patched:
            return det.patched_decision(self.net_, X)
        return det.decision_function(self.net_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)

    def score(self, X, y, sample_weight=None):
        """Balanced accuracy (not plain accuracy)."""
        y = check_binary_labels(y, len(np.asarray(X)))
        return metrics.balanced_accuracy(self.predict_proba(X)[:, 1], y)


class GenerativeProbe(BaseEstimator):
    """Adapt a fitted generator against a fitted detector and collect probe samples.

    ``fit`` ignores ``X``; the prompts come from the seeded prompt schedule.
    """

    def __init__(
        self,
        generator=None,
        detector=None,
        lam=1.0,
        lr=1e-3,
        momentum=0.9,
        batch=16,
        n_prompts=2000,
        K=5,
        t_s=5,
        rank=4,
        grad_branches="both",
        random_state=0,
    ):
        self.generator = generator
        self.detector = detector
        self.lam = lam
        self.lr = lr
        self.momentum = momentum
        self.batch = batch
        self.n_prompts = n_prompts
        self.K = K
        self.t_s = t_s
        self.rank = rank
        self.grad_branches = grad_branches
        self.random_state = random_state

    def fit(self, X=None, y=None):
        check_is_fitted(self.generator, "net_")
        check_is_fitted(self.detector, "net_")
        cfg = probe.ProbeConfig(
            lam=self.lam, lr=self.lr, momentum=self.momentum, batch=self.batch, n_prompts=self.n_prompts,
            K=self.K, t_s=self.t_s, rank=self.rank, seed=self.random_state, grad_branches=self.grad_branches,
            guidance=self.generator.guidance, extractor_seed=derive_seed(self.random_state, "extractor"),
        )
        result = probe.run_probe(self.generator.net_, self.generator.schedule_, self.detector.net_, cfg)
        self.lora_ = result.lora
        self.samples_ = result.samples
        self.log_ = result.log
        return self

    def transform(self, X=None):
        """The exported probe images (N, H, W)."""
        check_is_fitted(self, "samples_")
        return self.samples_.pixels


class RandomAugmenter(TransformerMixin, BaseEstimator):
    """Training-time augmentation; deterministic for a given ``random_state``."""

    def __init__(self, policy=None, random_state=0):
        self.policy = policy
        self.random_state = random_state

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = check_images(X)
        policy = augment.AugmentPolicy() if self.policy is None else self.policy
        return augment.augment_batch(X, policy, self.random_state, "transform")


class PostProcessor(TransformerMixin, BaseEstimator):
    """One evaluation-time post-processing op (``blur``, ``jpeg`` or ``resize``)."""

    def __init__(self, op="jpeg", strength=75):
        self.op = op
        self.strength = strength

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = check_images(X)
        out = metrics.apply_postprocess(self.op, self.strength, list(X))
        return np.stack(out) if len({o.shape for o in out}) == 1 else out


class ResidualSpectrum(TransformerMixin, BaseEstimator):
    """Radial power profile of one-step denoising residuals under a fitted generator."""

    def __init__(self, generator=None, t_probe=1):
        self.generator = generator
        self.t_probe = t_probe

    def fit(self, X=None, y=None):
        check_is_fitted(self.generator, "net_")
        return self

    def transform(self, X):
        X = check_images(X, self.generator.net_.image_size)
        self.radius_, profile = metrics.residual_spectrum(
            self.generator.net_, self.generator.schedule_, X, self.t_probe
        )
        return profile
