"""HOT decision engine: clinical-image diagnosis with OOD alert and triage
recommendation, plus the combined clinical+dermoscopic pass.

An engine wraps one model per input modality. A directory is either a single
checkpoint (its modality read from meta) or a bundle with ``clinical/``,
``dermoscopic/`` and/or ``multimodal/`` checkpoint subdirectories. Decision
thresholds come from the clinical model's calibration and the same t_ood is
applied to the combined pass.
"""

from __future__ import annotations

import io
import time
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from . import checkpoint as ckpt
from . import taxonomy as tx
from .calibration import Thresholds
from .errors import (
    DuplicateDermoscopic,
    MissingThresholds,
    ModalityMismatch,
    UnknownSession,
)
from .model import (
    HierarchicalModel,
    LabelMaps,
    ModelConfig,
    init_model,
    level3_confidence,
)

MODEL_ROLES = ("clinical", "dermoscopic", "multimodal")


@dataclass(frozen=True)
class HotDecision:
    pred_l1: str
    pred_l2: str
    pred_l3: str
    conf_l1: float
    conf_l2: float
    conf_l3: float
    ood_alert: bool
    triage_recommended: bool
    min_proto_distance: float | None
    thresholds_used: Thresholds
    modality_used: str  # "clinical" or "combined"
    hierarchy_consistent: bool

    def to_dict(self) -> dict:
        return {
            "pred_l1": self.pred_l1,
            "pred_l2": self.pred_l2,
            "pred_l3": self.pred_l3,
            "conf_l1": self.conf_l1,
            "conf_l2": self.conf_l2,
            "conf_l3": self.conf_l3,
            "ood_alert": self.ood_alert,
            "triage_recommended": self.triage_recommended,
            "min_proto_distance": self.min_proto_distance,
            "thresholds_used": {
                "t_ood": self.thresholds_used.t_ood,
                "t_triage": self.thresholds_used.t_triage,
            },
            "modality_used": self.modality_used,
            "hierarchy_consistent": self.hierarchy_consistent,
        }


def decision_flags(
    conf_l3: float, min_proto_distance: float | None, thresholds: Thresholds
) -> tuple[bool, bool]:
    """The decision rule: OOD alert on low confidence; triage on an alert or
    on a nearest-prototype distance above the triage threshold."""
    ood_alert = conf_l3 < thresholds.t_ood
    triage = ood_alert or (
        min_proto_distance is not None and min_proto_distance > thresholds.t_triage
    )
    return ood_alert, triage


def load_image_array(source: str | Path | bytes, size: int) -> np.ndarray:
    """Decode PNG/JPEG bytes or file to an RGB float array at the model size."""
    if isinstance(source, (str, Path)):
        im = Image.open(source)
    else:
        im = Image.open(io.BytesIO(source))
    with im:
        rgb = im.convert("RGB")
        if rgb.size != (size, size):
            rgb = rgb.resize((size, size), Image.BILINEAR)
        return np.asarray(rgb, dtype=np.float32) / 255.0


class Engine:
    """Immutable after load; safe for concurrent diagnoses."""

    def __init__(
        self,
        models: dict[str, HierarchicalModel],
        configs: dict[str, ModelConfig],
        taxonomy: tx.Taxonomy,
        thresholds: Thresholds | None,
        checkpoint_digest: str = "",
    ):
        if not models:
            raise ModalityMismatch("engine needs at least one model")
        self.models = models
        self.configs = configs
        self.taxonomy = taxonomy
        self.maps = LabelMaps.from_taxonomy(taxonomy)
        self.thresholds = thresholds
        self.checkpoint_digest = checkpoint_digest
        for m in models.values():
            m.eval()

    # -- loading ---------------------------------------------------------

    @staticmethod
    def load(path: str | Path) -> "Engine":
        root = Path(path)
        roles: dict[str, Path] = {}
        if (root / "meta").exists():
            meta = ckpt.load_meta(root)
            roles[meta["model.modality"]] = root
        else:
            for role in MODEL_ROLES:
                if (root / role / "meta").exists():
                    roles[role] = root / role
            if not roles:
                raise ckpt.CheckpointError(f"{path}: neither a checkpoint nor a bundle")

        models, configs = {}, {}
        taxonomy = None
        thresholds = None
        digest = ""
        for role, d in roles.items():
            meta = ckpt.load_meta(d)
            cfg = ModelConfig.from_items(meta)
            model = init_model(cfg, seed=0)
            ckpt.load_state(d, model)
            model.eval()
            models[role] = model
            configs[role] = cfg
            taxonomy = ckpt.load_taxonomy(d)
            if role == "clinical" or thresholds is None:
                tvals = ckpt.load_thresholds(meta)
                if "t_ood" in tvals and "t_triage" in tvals:
                    thresholds = Thresholds(t_ood=tvals["t_ood"], t_triage=tvals["t_triage"])
            digest = meta.get("taxonomy.digest", "")
        return Engine(models, configs, taxonomy, thresholds, checkpoint_digest=digest)

    # -- decisions ---------------------------------------------------------

    def _require_thresholds(self) -> Thresholds:
        if self.thresholds is None:
            raise MissingThresholds("engine has no calibrated thresholds; run calibrate first")
        return self.thresholds

    def _decide(self, role: str, images: tuple[np.ndarray, ...], modality_used: str) -> HotDecision:
        model = self.models.get(role)
        if model is None:
            raise ModalityMismatch(f"engine has no {role!r} model")
        thresholds = self._require_thresholds()
        cfg = self.configs[role]
        tensors = tuple(
            torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).unsqueeze(0)
            for img in images
        )
        with torch.no_grad():
            out = model(*tensors)
            bank = getattr(model, "prototypes", None)
            conf3_t, pred3_t = level3_confidence(out, bank, cfg.variant, cfg.gamma)
            conf3, pred3 = float(conf3_t[0]), int(pred3_t[0])
            min_dist = None
            if bank is not None:
                diff = out.latent_l3[0] - bank
                min_dist = float((diff * diff).sum(-1).min())
            if out.logits_l1 is not None:
                p1 = F.softmax(out.logits_l1[0], dim=-1)
                p2 = F.softmax(out.logits_l2[0], dim=-1)
                conf1, pred1 = float(p1.max()), int(p1.argmax())
                conf2, pred2 = float(p2.max()), int(p2.argmax())
            else:  # singular variant: ancestors derived from the level-3 prediction
                path = self.taxonomy.label_path(self.maps.id_l3[pred3])
                pred1, pred2 = path.l1, path.l2
                conf1 = conf2 = conf3

        tax_l3 = self.maps.id_l3[pred3]
        path3 = self.taxonomy.label_path(tax_l3)
        ood_alert, triage = decision_flags(conf3, min_dist, thresholds)
        return HotDecision(
            pred_l1=self.taxonomy.level1_names[pred1],
            pred_l2=self.taxonomy.level2_names[pred2],
            pred_l3=self.taxonomy.level3_names[tax_l3],
            conf_l1=conf1,
            conf_l2=conf2,
            conf_l3=conf3,
            ood_alert=ood_alert,
            triage_recommended=triage,
            min_proto_distance=min_dist,
            thresholds_used=thresholds,
            modality_used=modality_used,
            hierarchy_consistent=(pred1 == path3.l1 and pred2 == path3.l2),
        )

    def diagnose_clinical(self, clinical: np.ndarray) -> HotDecision:
        return self._decide("clinical", (clinical,), "clinical")

    def diagnose_combined(self, clinical: np.ndarray, dermoscopic: np.ndarray) -> HotDecision:
        if "multimodal" not in self.models:
            raise ModalityMismatch("engine is not configured for combined diagnosis")
        return self._decide("multimodal", (clinical, dermoscopic), "combined")

    def image_size(self, role: str = "clinical") -> int:
        cfg = self.configs.get(role) or next(iter(self.configs.values()))
        return cfg.image_size


# -- triage sessions -----------------------------------------------------------


@dataclass
class TriageSession:
    session_id: str
    clinical: HotDecision
    combined: HotDecision | None = None
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)
    clinical_image: np.ndarray | None = None  # retained for the combined pass


class SessionStore:
    """In-process session storage with TTL eviction and per-session locking."""

    def __init__(self, ttl_seconds: float = 3600.0):
        self.ttl = ttl_seconds
        self._sessions: dict[str, TriageSession] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._global = threading.Lock()

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._global:
            if session_id not in self._locks:
                self._locks[session_id] = threading.Lock()
            return self._locks[session_id]

    def evict_expired(self) -> None:
        now = time.time()
        with self._global:
            dead = [k for k, s in self._sessions.items() if now - s.updated > self.ttl]
            for k in dead:
                self._sessions.pop(k, None)
                self._locks.pop(k, None)

    def open_session(self, engine: Engine, clinical: np.ndarray) -> TriageSession:
        decision = engine.diagnose_clinical(clinical)
        session = TriageSession(
            session_id=uuid.uuid4().hex, clinical=decision, clinical_image=clinical
        )
        with self._global:
            self._sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> TriageSession:
        self.evict_expired()
        session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSession(f"no session {session_id!r}")
        return session

    def submit_dermoscopic(
        self, engine: Engine, session_id: str, dermoscopic: np.ndarray
    ) -> TriageSession:
        """Allowed even when the clinical pass recommended no triage (override)."""
        lock = self._lock_for(session_id)
        with lock:
            session = self.get(session_id)
            if session.combined is not None:
                raise DuplicateDermoscopic(f"session {session_id!r} already has a combined decision")
            session.combined = engine.diagnose_combined(session.clinical_image, dermoscopic)
            session.updated = time.time()
            return session
