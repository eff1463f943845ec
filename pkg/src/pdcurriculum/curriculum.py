"""Episodic training schedules ordered by H&Y severity."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .data_model import STAGES, CohortManifest


class CurriculumKind(str, Enum):
    CURRICULUM = "curriculum"
    ANTI_CURRICULUM = "anti_curriculum"
    NONE = "none"


class BalanceMode(str, Enum):
    OFF = "off"
    BALANCED = "balanced"


# Order in which stages join the cumulative episodes. Stage 0 trails the
# curriculum (least visible signal) and therefore leads the anti-curriculum.
CURRICULUM_ORDER = (4, 3, 2, 1, 0)


@dataclass(frozen=True)
class Episode:
    included_stages: tuple[int, ...]
    subject_ids: tuple[str, ...]
    balanced: bool = False

    def __len__(self) -> int:
        return len(self.subject_ids)


@dataclass(frozen=True)
class EpisodePlan:
    kind: CurriculumKind
    balance: BalanceMode
    seed: int
    episodes: tuple[Episode, ...]

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def sizes(self) -> list[int]:
        return [len(e) for e in self.episodes]

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "balance": self.balance.value,
            "seed": self.seed,
            "episodes": {
                str(i): {
                    "included_stages": list(e.included_stages),
                    "balanced": e.balanced,
                    "subject_ids": list(e.subject_ids),
                }
                for i, e in enumerate(self.episodes)
            },
        }

    @classmethod
    def from_json(cls, raw: dict) -> "EpisodePlan":
        episodes = tuple(
            Episode(tuple(e["included_stages"]), tuple(e["subject_ids"]), bool(e["balanced"]))
            for _, e in sorted(raw["episodes"].items(), key=lambda kv: int(kv[0]))
        )
        return cls(CurriculumKind(raw["kind"]), BalanceMode(raw["balance"]), int(raw["seed"]), episodes)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EpisodePlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def stage_sequence(stages_present, kind: CurriculumKind) -> list[tuple[int, ...]]:
    """Cumulative stage sets, one per episode, skipping absent stages."""
    kind = CurriculumKind(kind)
    present = set(stages_present)
    if kind is CurriculumKind.NONE:
        return [tuple(sorted(present))]
    order = CURRICULUM_ORDER if kind is CurriculumKind.CURRICULUM else CURRICULUM_ORDER[::-1]
    seq, included = [], []
    for stage in order:
        if stage in present:
            included.append(stage)
            seq.append(tuple(sorted(included)))
    return seq


def build_episode_plan(
    train: CohortManifest,
    kind: CurriculumKind | str = CurriculumKind.CURRICULUM,
    balance: BalanceMode | str = BalanceMode.OFF,
    seed: int = 0,
) -> EpisodePlan:
    """Build the episode schedule for a training manifest.

    Every episode holds all training controls plus the patients of its
    cumulative stage set. With ``balance="balanced"`` the controls are
    subsampled, independently per episode, down to the episode's patient
    count whenever they outnumber the patients.
    """
    kind, balance = CurriculumKind(kind), BalanceMode(balance)
    controls = [r.subject_id for r in train.records if not r.is_patient]
    by_stage: dict[int, list[str]] = {}
    for r in train.records:
        if r.is_patient:
            if r.hy_stage not in STAGES:
                raise ValueError(f"{r.subject_id}: unknown H&Y stage {r.hy_stage!r}")
            by_stage.setdefault(r.hy_stage, []).append(r.subject_id)
    if not controls:
        raise ValueError("training manifest has no controls")
    if not by_stage:
        raise ValueError("training manifest has no patients")

    rng = random.Random(seed)
    episodes = []
    for stages in stage_sequence(by_stage, kind):
        patients = [sid for s in stages for sid in by_stage[s]]
        chosen = controls
        balanced = balance is BalanceMode.BALANCED
        if balanced and len(controls) > len(patients):
            chosen = rng.sample(controls, len(patients))
        roster = list(chosen) + patients
        rng.shuffle(roster)
        episodes.append(Episode(stages, tuple(roster), balanced))
    return EpisodePlan(kind, balance, seed, tuple(episodes))


def episode_subjects(plan: EpisodePlan, k: int) -> list[str]:
    if not -len(plan.episodes) <= k < len(plan.episodes):
        raise IndexError(f"episode {k} out of range for a plan with {len(plan.episodes)} episodes")
    return list(plan.episodes[k].subject_ids)
