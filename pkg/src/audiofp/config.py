"""Run configuration: one JSON document aggregating every stage's
parameters, plus the feature digest that ties fingerprint files to the
extraction settings that produced them."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .features import MelConfig, SegmentSpec
from .losses import LossConfig
from .training import TrainConfig

__all__ = ["IndexConfig", "RunConfig", "feature_digest"]


@dataclass
class IndexConfig:
    nlist: int = 256
    nprobe: int = 32
    k: int = 20

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunConfig:
    mel: MelConfig = field(default_factory=MelConfig)
    segment: SegmentSpec = field(default_factory=SegmentSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    seed: int = 0

    def feature_digest(self) -> bytes:
        return feature_digest(self.mel, self.segment)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mel": json.loads(self.mel.to_json()),
                "segment": json.loads(self.segment.to_json()),
                "train": self.train.to_dict(),
                "index": self.index.to_dict(),
                "seed": self.seed,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        return cls(
            mel=MelConfig(**raw.get("mel", {})),
            segment=SegmentSpec(**raw.get("segment", {})),
            train=TrainConfig.from_dict(raw["train"]) if "train" in raw else TrainConfig(),
            index=IndexConfig(**raw.get("index", {})),
            seed=raw.get("seed", 0),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_json(f.read())


def feature_digest(mel: MelConfig, segment: SegmentSpec) -> bytes:
    """32-byte digest of the feature extraction parameters.

    Stored in fingerprint-file headers; a mismatch between a database and
    the current configuration is a hard error upstream, preventing silent
    feature drift.
    """
    canonical = json.dumps(
        {"mel": json.loads(mel.to_json()), "segment": json.loads(segment.to_json())},
        sort_keys=True,
    )
    return hashlib.sha256(canonical.encode("utf-8")).digest()
