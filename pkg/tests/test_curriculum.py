from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdcurriculum.curriculum import (
    BalanceMode,
    CurriculumKind,
    EpisodePlan,
    build_episode_plan,
    episode_subjects,
    stage_sequence,
)

from conftest import make_manifest


def _stages(manifest, ids):
    by_id = {r.subject_id: r for r in manifest.records}
    return Counter("CN" if by_id[i].hy_stage is None else by_id[i].hy_stage for i in ids)


def test_taiwan_curriculum_sizes(taiwan_train):
    plan = build_episode_plan(taiwan_train, "curriculum", seed=0)
    assert plan.sizes == [207, 250, 317, 378]
    assert [e.included_stages for e in plan.episodes] == [(4,), (3, 4), (2, 3, 4), (1, 2, 3, 4)]


def test_taiwan_anti_curriculum_first_episode(taiwan_train):
    plan = build_episode_plan(taiwan_train, "anti_curriculum", seed=0)
    assert plan.sizes[0] == 241
    assert plan.sizes == [241, 308, 351, 378]


def test_none_is_single_episode(taiwan_train):
    plan = build_episode_plan(taiwan_train, "none")
    assert plan.sizes == [378]
    assert set(plan.episodes[0].subject_ids) == set(taiwan_train.subject_ids)


def test_balanced_taiwan(taiwan_train):
    plan = build_episode_plan(taiwan_train, "curriculum", "balanced", seed=3)
    first = _stages(taiwan_train, plan.episodes[0].subject_ids)
    assert first == {"CN": 27, 4: 27}
    last = _stages(taiwan_train, plan.episodes[-1].subject_ids)
    # patients outnumber controls: every control kept
    assert last["CN"] == 180 and sum(v for k, v in last.items() if k != "CN") == 198


def test_balanced_redraws_are_seeded(taiwan_train):
    a = build_episode_plan(taiwan_train, "curriculum", "balanced", seed=3)
    b = build_episode_plan(taiwan_train, "curriculum", "balanced", seed=3)
    c = build_episode_plan(taiwan_train, "curriculum", "balanced", seed=4)
    assert a == b
    assert a != c


def test_single_stage_cohort():
    m = make_manifest({None: 10, 2: 5})
    for kind in CurriculumKind:
        plan = build_episode_plan(m, kind)
        assert plan.sizes == [15]
        assert plan.episodes[0].included_stages == (2,)


def test_stage_zero_ordering():
    assert stage_sequence({0, 1, 4}, "curriculum") == [(4,), (1, 4), (0, 1, 4)]
    assert stage_sequence({0, 1, 4}, "anti_curriculum") == [(0,), (0, 1), (0, 1, 4)]


def test_missing_groups_rejected():
    with pytest.raises(ValueError, match="no controls"):
        build_episode_plan(make_manifest({3: 5}))
    with pytest.raises(ValueError, match="no patients"):
        build_episode_plan(make_manifest({None: 5}))


def test_plan_json_round_trip(tmp_path, taiwan_train):
    plan = build_episode_plan(taiwan_train, "anti_curriculum", "balanced", seed=9)
    plan.save(tmp_path / "plan.json")
    assert EpisodePlan.load(tmp_path / "plan.json") == plan


def test_episode_subjects_indexing(taiwan_train):
    plan = build_episode_plan(taiwan_train)
    assert episode_subjects(plan, -1) == list(plan.episodes[3].subject_ids)
    with pytest.raises(IndexError):
        episode_subjects(plan, 4)


counts_strategy = st.fixed_dictionaries({
    None: st.integers(1, 30), 1: st.integers(0, 12), 2: st.integers(0, 12),
    3: st.integers(0, 12), 4: st.integers(0, 12), 0: st.integers(0, 5),
}).filter(lambda c: sum(v for k, v in c.items() if k is not None) > 0)


@settings(max_examples=60, deadline=None)
@given(counts=counts_strategy, seed=st.integers(0, 1000))
def test_plan_properties(counts, seed):
    m = make_manifest(counts)
    present = sorted(k for k, v in counts.items() if k is not None and v)
    cur = build_episode_plan(m, "curriculum", seed=seed)
    anti = build_episode_plan(m, "anti_curriculum", seed=seed)
    for plan in (cur, anti):
        sets = [set(e.subject_ids) for e in plan.episodes]
        # cumulative and ending on the full cohort
        assert all(a < b for a, b in zip(sets, sets[1:]))
        assert sets[-1] == set(m.subject_ids)
        assert len(plan) == len(present)
        assert len(set(plan.sizes)) == len(plan.sizes)
    # duality: reversed stage order
    first_added = [e.included_stages for e in cur.episodes]
    added_cur = [next(iter(set(b) - set(a))) for a, b in zip([()] + first_added, first_added)]
    first_added = [e.included_stages for e in anti.episodes]
    added_anti = [next(iter(set(b) - set(a))) for a, b in zip([()] + first_added, first_added)]
    assert added_cur == added_anti[::-1]


@settings(max_examples=60, deadline=None)
@given(counts=counts_strategy, seed=st.integers(0, 1000))
def test_balanced_properties(counts, seed):
    m = make_manifest(counts)
    plan = build_episode_plan(m, "curriculum", "balanced", seed=seed)
    n_controls = counts[None]
    for e in plan.episodes:
        c = _stages(m, e.subject_ids)
        patients = len(e) - c["CN"]
        assert c["CN"] == min(n_controls, patients)
        assert len(set(e.subject_ids)) == len(e)
