"""The six systems: intermediate, prediction, late and voting fusion plus the
two unimodal baselines, with tabular classifier heads and soft voting."""

from __future__ import annotations

import hashlib
import json
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .evaluation.predictions import PredictionSet
from .paths import DemographicPath, EncoderConfig, FundusPath, FusionPath, PathConfig, mlp

STRATEGIES = ("intermediate", "prediction", "late", "voting",
              "unimodal_fundus", "unimodal_demographic")
HEAD_KINDS = ("fcnn", "gradient_boosted_trees", "support_vector_machine", "soft_vote")
_HEAD_ALIASES = {"gbt": "gradient_boosted_trees", "svm": "support_vector_machine"}

# prerequisite roles each stacked strategy needs
PREREQUISITES = {
    "late": ("fundus",),
    "voting": ("fundus", "demographic", "intermediate"),
}
_PREREQ_STRATEGY = {"fundus": "unimodal_fundus", "demographic": "unimodal_demographic",
                    "intermediate": "intermediate"}

DEFAULT_GRIDS = {
    "gradient_boosted_trees": {"n_estimators": [50, 100], "max_depth": [2, 3],
                               "learning_rate": [0.1]},
    "support_vector_machine": {"C": [0.1, 1.0, 10.0], "gamma": ["scale"]},
}


class FusionSpecError(ValueError):
    """Invalid combination of strategy, head and prerequisites."""


class NotFittedError(RuntimeError):
    """Model or head used before training/fitting."""


@dataclass
class FusionSpec:
    strategy: str
    head_kind: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    prerequisites: dict = field(default_factory=dict)
    head_grid: dict | None = None
    head_epochs: int = 250
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.paths, dict):
            self.paths = PathConfig(**self.paths)
        self.head_kind = _HEAD_ALIASES.get(self.head_kind, self.head_kind)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "head_kind": self.head_kind,
                "encoder": asdict(self.encoder), "paths": asdict(self.paths),
                "head_grid": self.head_grid, "head_epochs": self.head_epochs,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict, prerequisites: dict | None = None) -> FusionSpec:
        d = dict(d)
        enc = dict(d.pop("encoder", {}))
        if "toy_channels" in enc:
            enc["toy_channels"] = tuple(enc["toy_channels"])
        return cls(encoder=EncoderConfig(**enc), paths=PathConfig(**d.pop("paths", {})),
                   prerequisites=prerequisites or {}, **d)


def validate_spec(spec: FusionSpec, check_trained: bool = True) -> FusionSpec:
    s, h = spec.strategy, spec.head_kind
    if s not in STRATEGIES:
        raise FusionSpecError(f"strategy must be one of {STRATEGIES}, got {s!r}")
    if h is not None and h not in HEAD_KINDS:
        raise FusionSpecError(f"head_kind must be one of {HEAD_KINDS}, got {h!r}")
    if h == "soft_vote" and s != "voting":
        raise FusionSpecError("soft_vote head is only valid with the voting strategy")
    if s in ("intermediate", "prediction", "unimodal_fundus") and h not in (None, "fcnn"):
        raise FusionSpecError(f"strategy {s!r} takes no tabular head (got {h!r})")
    if s == "late" and h is None:
        raise FusionSpecError("late fusion needs head_kind (fcnn, gbt or svm)")
    for role in PREREQUISITES.get(s, ()):
        model = spec.prerequisites.get(role)
        if model is None:
            raise FusionSpecError(f"{s} fusion requires a trained {role!r} model")
        if check_trained and not getattr(model, "trained", False):
            raise NotFittedError(f"prerequisite {role!r} model is not trained")
        if getattr(model, "strategy", None) != _PREREQ_STRATEGY[role]:
            raise FusionSpecError(f"prerequisite {role!r} must be a {_PREREQ_STRATEGY[role]} model, "
                                  f"got {getattr(model, 'strategy', type(model).__name__)}")
    return spec


# ---------------------------------------------------------------- neural

class NeuralSystem(nn.Module):
    """Base for the jointly trained systems; forward returns one logit per row."""

    strategy = ""
    uses_images = True

    def __init__(self, spec: FusionSpec):
        super().__init__()
        self.spec = spec
        self.trained = False

    def blocks(self) -> dict[str, nn.Module]:
        raise NotImplementedError

    def param_groups(self) -> list[dict]:
        """Backbone parameters vs newly initialized layers, each with its own lr."""
        enc = self.spec.encoder
        backbone, head = [], []
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            (backbone if ".backbone." in f".{name}" else head).append(p)
        groups = []
        if backbone:
            groups.append({"name": "backbone", "params": backbone, "lr": enc.backbone_learning_rate})
        if head:
            groups.append({"name": "head", "params": head, "lr": enc.head_learning_rate})
        return groups


class IntermediateFusion(NeuralSystem):
    strategy = "intermediate"

    def __init__(self, spec: FusionSpec, require_weights: bool = True):
        super().__init__(spec)
        self.fundus = FundusPath(spec.encoder, "features", require_weights=require_weights)
        self.demographic = DemographicPath(spec.paths, "features")
        self.fusion_width = self.fundus.out_dim + self.demographic.out_dim
        self.fusion = FusionPath(self.fusion_width, spec.paths)

    def blocks(self):
        return {"fundus": self.fundus, "demographic": self.demographic, "fusion": self.fusion}

    def forward(self, inputs):
        fused = torch.cat([self.fundus(inputs["images"]), self.demographic(inputs["demo"])], dim=1)
        return self.fusion(fused).squeeze(-1)


class PredictionFusion(IntermediateFusion):
    strategy = "prediction"

    def __init__(self, spec: FusionSpec, require_weights: bool = True):
        NeuralSystem.__init__(self, spec)
        self.fundus = FundusPath(spec.encoder, "logit", require_weights=require_weights)
        self.demographic = DemographicPath(spec.paths, "logit")
        self.fusion_width = 2
        self.fusion = FusionPath(2, spec.paths)


class UnimodalFundus(NeuralSystem):
    strategy = "unimodal_fundus"

    def __init__(self, spec: FusionSpec, require_weights: bool = True):
        super().__init__(spec)
        self.fundus = FundusPath(spec.encoder, "logit", require_weights=require_weights)

    def blocks(self):
        return {"fundus": self.fundus}

    def forward(self, inputs):
        return self.fundus(inputs["images"]).squeeze(-1)


class UnimodalDemographic(NeuralSystem):
    strategy = "unimodal_demographic"
    uses_images = False

    def __init__(self, spec: FusionSpec):
        super().__init__(spec)
        self.demographic = DemographicPath(spec.paths, "logit")

    def blocks(self):
        return {"demographic": self.demographic}

    def forward(self, inputs):
        return self.demographic(inputs["demo"]).squeeze(-1)


def _iter_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def predict_logits(model: NeuralSystem, table, batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode logits in table row order (float64)."""
    was = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for idx in _iter_batches(len(table), batch_size):
                inputs, _ = table.batch(idx)
                out.append(model(inputs).double().cpu().numpy().reshape(-1))
    finally:
        model.train(was)
    logits = np.concatenate(out)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("model produced non-finite logits")
    return logits


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------- tabular

class TabularHead:
    """Classifier on a small feature matrix: fcnn, gradient-boosted trees or SVM.

    The tree and SVM kinds delegate to scikit-learn and are tuned by
    cross-validated grid search.  SVM probabilities come from Platt scaling.
    """

    def __init__(self, kind: str, grid: dict | None = None, seed: int = 0,
                 paths: PathConfig | None = None, epochs: int = 250, lr: float = 1e-3,
                 batch_size: int = 16, cv_folds: int = 3):
        kind = _HEAD_ALIASES.get(kind, kind)
        if kind not in ("fcnn", "gradient_boosted_trees", "support_vector_machine"):
            raise FusionSpecError(f"unknown tabular head kind {kind!r}")
        self.kind = kind
        self.grid = grid if grid is not None else DEFAULT_GRIDS.get(kind)
        self.seed = seed
        self.paths = paths or PathConfig()
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.cv_folds = cv_folds
        self.in_dim: int | None = None
        self.best_params: dict | None = None
        self._model = None
        self._center = None
        self._scale = None

    @property
    def fitted(self) -> bool:
        return self._model is not None

    @property
    def calibration(self) -> str:
        return {"fcnn": "sigmoid of network logit",
                "gradient_boosted_trees": "native class probabilities",
                "support_vector_machine": "Platt scaling (SVC probability=True, internal 5-fold CV)",
                }[self.kind]

    def _standardize(self, x):
        return (x - self._center) / self._scale

    def fit(self, x, y) -> TabularHead:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or len(x) != len(y) or len(y) == 0:
            raise ValueError("fit needs a non-empty 2-D feature matrix aligned with labels")
        if len(np.unique(y)) < 2:
            raise ValueError("fit needs both classes present")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        self.in_dim = x.shape[1]
        self._center = x.mean(axis=0)
        scale = x.std(axis=0)
        self._scale = np.where(scale > 0, scale, 1.0)
        if self.kind == "fcnn":
            self._model = self._fit_fcnn(self._standardize(x), y)
        else:
            self._model = self._fit_sklearn(x, y)
        return self

    def _fit_sklearn(self, x, y):
        from sklearn.ensemble import GradientBoostingClassifier
        from sklearn.model_selection import GridSearchCV, StratifiedKFold
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler
        from sklearn.svm import SVC

        if self.kind == "gradient_boosted_trees":
            est = GradientBoostingClassifier(random_state=self.seed)
            grid = self.grid
        else:
            est = make_pipeline(StandardScaler(), SVC(probability=True, random_state=self.seed))
            grid = {f"svc__{k}": v for k, v in self.grid.items()}
        folds = min(self.cv_folds, int(np.bincount(y).min()))
        if folds < 2:
            est.set_params(**{k: v[0] for k, v in grid.items()})
            self.best_params = {k: v[0] for k, v in grid.items()}
            return est.fit(x, y)
        search = GridSearchCV(est, grid, scoring="roc_auc",
                              cv=StratifiedKFold(folds, shuffle=True, random_state=self.seed),
                              n_jobs=1)
        search.fit(x, y)
        self.best_params = dict(search.best_params_)
        return search.best_estimator_

    def _fit_fcnn(self, x, y):
        from .training import AdamW, bce_loss, cosine_lr

        gen = torch.Generator().manual_seed(self.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            net = mlp(x.shape[1], 1, self.paths.demographic_standalone_layers,
                      self.paths.hidden_width, self.paths.dropout_rate,
                      self.paths.negative_slope).double()
            opt = AdamW([{"params": list(net.parameters()), "lr": self.lr}])
            xt = torch.as_tensor(x)
            yt = torch.as_tensor(y, dtype=torch.float64)
            n = len(y)
            per_epoch = -(-n // self.batch_size)
            total = self.epochs * per_epoch
            step = 0
            net.train()
            for _ in range(self.epochs):
                order = torch.randperm(n, generator=gen)
                for start in range(0, n, self.batch_size):
                    idx = order[start:start + self.batch_size]
                    opt.set_lr_scale(cosine_lr(step, total, 1.0, 0.0))
                    loss = bce_loss(net(xt[idx]).squeeze(-1), yt[idx])
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    step += 1
        net.eval()
        self.best_params = {"epochs": self.epochs, "lr": self.lr}
        return net

    def predict_proba(self, x) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError(f"{self.kind} head used before fit")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"head expects width {self.in_dim}, got {x.shape}")
        if self.kind == "fcnn":
            with torch.no_grad():
                z = self._model(torch.as_tensor(self._standardize(x))).squeeze(-1).numpy()
            p = sigmoid(z)
        else:
            p = self._model.predict_proba(x)[:, 1]
        return np.clip(p, 0.0, 1.0)

    def accuracy(self, x, y, threshold: float = 0.5) -> float:
        return float(np.mean((self.predict_proba(x) >= threshold) == np.asarray(y)))


def soft_vote(probabilities) -> np.ndarray:
    """Arithmetic mean across the last axis."""
    p = np.asarray(probabilities, dtype=np.float64)
    return p.sum(axis=-1) / p.shape[-1]


def weight_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class StackedSystem:
    """Late or voting fusion: frozen prerequisite models feeding a head."""

    def __init__(self, spec: FusionSpec):
        self.spec = spec
        self.strategy = spec.strategy
        self.prerequisites = dict(spec.prerequisites)
        self.head: TabularHead | None = None
        if spec.head_kind not in (None, "soft_vote"):
            self.head = TabularHead(spec.head_kind, spec.head_grid, spec.seed, spec.paths,
                                    epochs=spec.head_epochs,
                                    lr=spec.encoder.head_learning_rate)
        self.fit_subset: str | None = None

    @property
    def uses_images(self) -> bool:
        return True

    @property
    def trained(self) -> bool:
        return self.head is None or self.head.fitted

    def features(self, table) -> np.ndarray:
        if self.strategy == "late":
            logit = predict_logits(self.prerequisites["fundus"], table)
            return np.column_stack([logit, table.age_std, table.gender.astype(np.float64)])
        return np.column_stack([predict_logits(self.prerequisites[r], table)
                                for r in PREREQUISITES["voting"]])

    def fit(self, table, subset: str = "train") -> StackedSystem:
        """Fit the head on ``table``; prerequisite weights are left untouched."""
        if self.head is not None:
            before = {r: weight_checksum(m) for r, m in self.prerequisites.items()}
            self.head.fit(self.features(table), table.label)
            after = {r: weight_checksum(m) for r, m in self.prerequisites.items()}
            if before != after:
                raise RuntimeError("prerequisite weights changed during head fitting")
        self.fit_subset = subset
        return self

    def probabilities(self, table) -> np.ndarray:
        x = self.features(table)
        if self.head is None:
            return soft_vote(sigmoid(x))
        return self.head.predict_proba(x)


def late_fusion_fit(trained_fundus: UnimodalFundus, train_table, head_kind: str,
                    **spec_kw) -> StackedSystem:
    spec = FusionSpec("late", head_kind, prerequisites={"fundus": trained_fundus}, **spec_kw)
    return assemble(spec).fit(train_table)


def voting_fusion_predict(logits, head: TabularHead | str = "soft_vote") -> np.ndarray:
    """Probability from a (fundus, demographic, intermediate) logit triple."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if z.shape[1] != 3:
        raise ValueError(f"voting needs a logit triple, got width {z.shape[1]}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if isinstance(head, str):
        if head != "soft_vote":
            raise FusionSpecError(f"unknown voting head {head!r}")
        return soft_vote(sigmoid(z))
    return head.predict_proba(z)


_NEURAL = {"intermediate": IntermediateFusion, "prediction": PredictionFusion,
           "unimodal_fundus": UnimodalFundus}


def assemble(spec: FusionSpec, require_weights: bool = True):
    """Build an untrained system from a validated spec."""
    validate_spec(spec, check_trained=require_weights)
    s = spec.strategy
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        if s in _NEURAL:
            return _NEURAL[s](spec, require_weights)
        if s == "unimodal_demographic":
            if spec.head_kind in (None, "fcnn"):
                return UnimodalDemographic(spec)
            return DemographicHead(spec)
        if s == "voting" and spec.head_kind is None:
            spec.head_kind = "soft_vote"
        return StackedSystem(spec)


class DemographicHead:
    """Demographics-only baseline backed by a tree or SVM head."""

    strategy = "unimodal_demographic"
    uses_images = False

    def __init__(self, spec: FusionSpec):
        self.spec = spec
        self.head = TabularHead(spec.head_kind, spec.head_grid, spec.seed, spec.paths,
                                epochs=spec.head_epochs, lr=spec.encoder.head_learning_rate)
        self.fit_subset = None

    @property
    def trained(self) -> bool:
        return self.head.fitted

    def fit(self, table, subset: str = "train") -> DemographicHead:
        self.head.fit(table.demographics(), table.label)
        self.fit_subset = subset
        return self

    def probabilities(self, table) -> np.ndarray:
        return self.head.predict_proba(table.demographics())


def predict_proba(model, table, batch_size: int = 64) -> PredictionSet:
    """Per-image probabilities aligned with ids, labels and diabetes flags."""
    if not getattr(model, "trained", False):
        raise NotFittedError(f"{getattr(model, 'strategy', type(model).__name__)} model is not trained")
    if isinstance(model, NeuralSystem):
        prob = sigmoid(predict_logits(model, table, batch_size))
    else:
        prob = model.probabilities(table)
    return PredictionSet(np.asarray(table.image_id), np.asarray(table.patient_id), prob,
                         np.asarray(table.label), np.asarray(table.diabetes))


# ---------------------------------------------------------------- storage

def save_system(model, directory, preprocessing: dict | None = None) -> list[Path]:
    """Write weights/head plus spec JSON; prerequisites go to subdirectories."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    meta = {"spec": model.spec.to_dict(), "trained": bool(model.trained),
            "preprocessing": preprocessing or {}}
    if isinstance(model, NeuralSystem):
        torch.save(model.state_dict(), d / "weights.pt")
        written.append(d / "weights.pt")
    else:
        meta["fit_subset"] = model.fit_subset
        if model.head is not None:
            meta["head"] = {"kind": model.head.kind, "best_params": model.head.best_params,
                            "calibration": model.head.calibration}
            with open(d / "head.pkl", "wb") as fh:
                pickle.dump(model.head, fh)
            written.append(d / "head.pkl")
        for role, sub in getattr(model, "prerequisites", {}).items():
            written += save_system(sub, d / role, preprocessing)
    meta["spec"]["prerequisites"] = sorted(getattr(model, "prerequisites", {}))
    (d / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    written.append(d / "spec.json")
    return written


def load_system(directory):
    d = Path(directory)
    if not (d / "spec.json").is_file():
        raise FileNotFoundError(f"no saved model at {d} (spec.json missing)")
    meta = json.loads((d / "spec.json").read_text())
    sd = dict(meta["spec"])
    roles = sd.pop("prerequisites", [])
    prereqs = {role: load_system(d / role) for role in roles}
    spec = FusionSpec.from_dict(sd, prereqs)
    # backbone weights come from the checkpoint itself, not the original file
    model = assemble(spec, require_weights=False)
    if isinstance(model, NeuralSystem):
        model.load_state_dict(torch.load(d / "weights.pt", map_location="cpu", weights_only=True))
        model.trained = meta["trained"]
    else:
        if (d / "head.pkl").is_file():
            with open(d / "head.pkl", "rb") as fh:
                model.head = pickle.load(fh)
        model.fit_subset = meta.get("fit_subset")
    model.preprocessing = meta.get("preprocessing", {})
    return model
