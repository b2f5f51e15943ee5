import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2_contingency

from soundscreen.cohort import (
    AGE_BINS,
    BiasSpec,
    SampleRecord,
    SplitAssignment,
    SplitMode,
    confounded_axes,
    confounder_report,
    cramers_v,
    dump_manifest,
    inject_bias,
    match_demographics,
    parse_manifest,
    participant_profiles,
    split_participants,
)
from soundscreen.errors import ConsistencyError, DuplicateKey, InsufficientCohort, SchemaError, Unmatchable

MODS = ("breathing", "cough", "voice")


def _record(pid, sid="s00", modality="cough", label="positive", gender="male", age_bin="30-39", language="en", ts=0.0):
    return SampleRecord(pid, sid, modality, label, age_bin, gender, language, False, ts, f"data/{pid}/{sid}/{modality}.wav")


def _cohort(people, sessions=1):
    """people: list of (label, gender, age_bin, language)."""
    out = []
    for i, (label, gender, age, lang) in enumerate(people):
        for s in range(sessions):
            out.append(_record(f"p{i:03d}", f"s{s:02d}", "cough", label, gender, age, lang, float(s)))
    return out


def _random_cohort(n_pos, n_neg, seed, sessions=1):
    rng = np.random.default_rng(seed)
    people = [(label, str(rng.choice(["male", "female"])), str(rng.choice(AGE_BINS[:6])), str(rng.choice(["en", "it"])))
              for label, n in (("positive", n_pos), ("negative", n_neg)) for _ in range(n)]
    return _cohort(people, sessions)


# ---------------------------------------------------------------- manifests


def test_parse_manifest_examples():
    assert parse_manifest("") == []
    recs = [_record(pid, modality=m) for pid in ("a", "b") for m in MODS]
    parsed = parse_manifest(dump_manifest(recs))
    assert len(parsed) == 6
    assert len({r.participant_id for r in parsed}) == 2
    assert parsed == recs


def test_conflicting_demographics():
    text = dump_manifest([_record("a", "s00", gender="male"), _record("a", "s01", gender="female")])
    with pytest.raises(ConsistencyError):
        parse_manifest(text)


def test_duplicate_key():
    text = dump_manifest([_record("a"), _record("a")])
    with pytest.raises(DuplicateKey):
        parse_manifest(text)


@pytest.mark.parametrize(
    "field,value",
    [("label", "maybe"), ("gender", "other"), ("age_bin", "15-20"), ("symptomatic", "yes"), ("timestamp", "noon"),
     ("participant_id", ""), ("modality", "sneeze")],
)
def test_schema_errors_name_line_and_field(field, value):
    good = json.loads(dump_manifest([_record("a")]))
    bad = dict(good, **{field: value})
    text = json.dumps(good) + "\n" + json.dumps(bad) + "\n"
    with pytest.raises(SchemaError) as info:
        parse_manifest(text)
    assert info.value.line == 2 and info.value.field == field


def test_participant_label_is_positive_if_any_session_is():
    recs = [_record("a", "s00", label="negative"), _record("a", "s01", label="positive")]
    assert participant_profiles(recs)["a"].label == "positive"


# ---------------------------------------------------------------- splits


def test_participant_random_stratified_counts():
    recs = _random_cohort(10, 10, 0)
    split = split_participants(recs, (0.7, 0.1, 0.2), "participant_random", seed=3)
    profiles = participant_profiles(recs)
    for label in ("positive", "negative"):
        sizes = [sum(1 for p, s in split.participants.items() if s == name and profiles[p].label == label)
                 for name in ("train", "validation", "test")]
        assert sizes == [7, 1, 2]
    sets = [split.participants_in(s) for s in ("train", "validation", "test")]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert set().union(*sets) == set(profiles)


def test_split_is_deterministic_and_seed_dependent():
    recs = _random_cohort(20, 20, 1, sessions=2)
    for mode in ("participant_random", "participant_matched", "sample_random"):
        a = split_participants(recs, mode=mode, seed=5)
        b = split_participants(recs, mode=mode, seed=5)
        assert a.to_json() == b.to_json()
    assert split_participants(recs, seed=5).participants != split_participants(recs, seed=6).participants


def test_sample_random_can_straddle_sets():
    recs = _random_cohort(10, 10, 2, sessions=3)
    straddlers = 0
    for seed in range(5):
        split = split_participants(recs, mode="sample_random", seed=seed)
        assert split.leakage_possible and split.to_json()["leakage_possible"] is True
        per = {}
        for (pid, _), s in split.sessions.items():
            per.setdefault(pid, set()).add(s)
        straddlers += sum(len(v) > 1 for v in per.values())
    assert straddlers > 0


@pytest.mark.parametrize("seed", range(20))
def test_sample_random_always_exposes_a_straddler(seed):
    # one two-session participant among single-session ones
    recs = _random_cohort(10, 10, 0) + [_record("zz", sid, label="negative") for sid in ("s01", "s02")]
    plain = {(r.participant_id, r.session_id): r.y for r in recs}
    split = split_participants(recs, mode="sample_random", seed=seed)
    per = {}
    for (pid, _), s in split.sessions.items():
        per.setdefault(pid, set()).add(s)
    assert any(len(v) > 1 for v in per.values())
    # per-label set sizes follow the ratios whether or not a swap happened
    for y in (0, 1):
        sizes = [sum(1 for k, s in split.sessions.items() if s == name and plain[k] == y) for name in ("train", "validation", "test")]
        assert sizes == {1: [7, 1, 2], 0: [8, 1, 3]}[y]


def test_insufficient_cohort():
    recs = _random_cohort(2, 10, 0)
    with pytest.raises(InsufficientCohort):
        split_participants(recs, (0.7, 0.1, 0.2))


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.7, 0.2, 0.2), (1.0, 0.0, 0.0)])
def test_bad_ratios(ratios):
    with pytest.raises(ValueError):
        split_participants(_random_cohort(10, 10, 0), ratios)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["participant_random", "participant_matched"]))
def test_participant_modes_are_disjoint(seed, mode):
    recs = _random_cohort(30, 30, seed % 7, sessions=2)
    try:
        split = split_participants(recs, mode=mode, seed=seed, tolerance_pp=20.0)
    except Unmatchable:
        return
    sets = [split.participants_in(s) for s in ("train", "validation", "test")]
    assert sum(map(len, sets)) == len(set().union(*sets))
    # every session of a participant lands in the same set
    for r in recs:
        assert split.set_of(r.participant_id, r.session_id) == split.participants.get(r.participant_id)


def test_split_json_round_trip():
    recs = _random_cohort(10, 10, 0, sessions=2)
    for mode in ("participant_random", "sample_random"):
        split = split_participants(recs, mode=mode, seed=1)
        again = SplitAssignment.from_json(json.loads(json.dumps(split.to_json())))
        assert again.to_json() == split.to_json()


# ---------------------------------------------------------------- matching


def _test_split(pos_people, neg_people):
    """Split with every participant in the test set."""
    people = pos_people + neg_people
    recs = _cohort(people)
    split = SplitAssignment(SplitMode.participant_random, 0)
    for i in range(len(people)):
        split.participants[f"p{i:03d}"] = "test"
    return recs, split


def test_matching_tolerates_small_gap():
    pos = [("positive", "male", "30-39", "en")] * 58 + [("positive", "female", "30-39", "en")] * 42
    neg = [("negative", "male", "30-39", "en")] * 52 + [("negative", "female", "30-39", "en")] * 48
    recs, split = _test_split(pos, neg)
    out = match_demographics(recs, split, ("gender",), tolerance_pp=10.0)
    assert out.participants == split.participants
    assert out.report["matching"]["dropped"] == 0 and out.report["matching"]["moves"] == 0


def test_matching_fixed_point_on_matched_cohort():
    people = [(lab, g, a, "en") for lab in ("positive", "negative") for g in ("male", "female") for a in ("16-29", "70+")]
    recs, split = _test_split(people[:4] * 3, people[4:] * 3)
    out = match_demographics(recs, split)
    assert out.participants == split.participants and out.dropped == []


def test_matching_impossible():
    pos = [("positive", "male", "30-39", "en")] * 10
    neg = [("negative", "female", "30-39", "en")] * 10
    recs, split = _test_split(pos, neg)
    with pytest.raises(Unmatchable):
        match_demographics(recs, split, ("gender",), tolerance_pp=5.0)


def test_matching_reaches_tolerance_and_never_touches_training():
    recs = _random_cohort(40, 40, 3)
    base = split_participants(recs, mode="participant_random", seed=2)
    out = match_demographics(recs, base, ("gender", "age_bin"), tolerance_pp=15.0, min_test_size=3)
    assert out.participants_in("train") == base.participants_in("train")
    assert not (set(out.dropped) & base.participants_in("train"))
    profiles = participant_profiles(recs)
    test = [profiles[p] for p in out.participants_in("test")]
    for axis in ("gender", "age_bin"):
        pos = [p.category(axis) for p in test if p.label == "positive"]
        neg = [p.category(axis) for p in test if p.label == "negative"]
        assert len(pos) >= 3 and len(neg) >= 3
        for cat in set(pos) | set(neg):
            assert abs(pos.count(cat) / len(pos) - neg.count(cat) / len(neg)) * 100 <= 15.0 + 1e-9


# ---------------------------------------------------------------- bias injection


def _gender_pool(n_each=60):
    people = [(lab, g, "30-39", "en") for lab in ("positive", "negative") for g in ("male", "female") for _ in range(n_each)]
    return _cohort(people)


def test_gender_skew_hits_targets():
    recs = _gender_pool()
    spec = BiasSpec("gender", {"negative": {"female": 0.9, "male": 0.1}, "positive": {"female": 0.45, "male": 0.55}},
                    n_train_per_class=50, n_val_per_class=5, n_test_per_class=10)
    split = inject_bias(recs, spec, seed=1)
    assert split.mode is SplitMode.gender_biased
    rep = confounder_report(recs, split)
    table = rep["train"]["gender"]["table"]
    cats = rep["train"]["gender"]["categories"]
    assert abs(table["negative"][cats.index("female")] - 45) <= 1
    assert abs(table["positive"][cats.index("male")] - 27.5) <= 1
    sets = [split.participants_in(s) for s in ("train", "validation", "test")]
    assert sum(map(len, sets)) == len(set().union(*sets))
    # balanced test: both arms evenly split across genders
    test_table = rep["test"]["gender"]["table"]
    assert test_table["positive"] == test_table["negative"] == [5, 5]


def test_training_set_is_independent_of_test_policy():
    recs = _gender_pool()
    skew = {"negative": {"female": 0.8, "male": 0.2}, "positive": {"female": 0.2, "male": 0.8}}
    kw = dict(n_train_per_class=30, n_val_per_class=5, n_test_per_class=10)
    a = inject_bias(recs, BiasSpec("gender", skew, "balanced", **kw), seed=4)
    b = inject_bias(recs, BiasSpec("gender", skew, "natural", **kw), seed=4)
    assert a.participants_in("train") == b.participants_in("train")
    assert a.participants_in("test") != b.participants_in("test")
    rep = confounder_report(recs, b)
    assert rep["test"]["gender"]["cramers_v"] > 0.2
    assert confounded_axes(rep) == ["gender"]


def test_perfect_age_confound_gives_unit_v():
    people = ([("positive", "male", a, "en") for a in ("16-29", "30-39") for _ in range(20)]
              + [("negative", "male", a, "en") for a in ("50-59", "60-69") for _ in range(20)])
    recs = _cohort(people)
    spec = BiasSpec("age_bin", {"positive": {"16-29": 0.5, "30-39": 0.5}, "negative": {"50-59": 0.5, "60-69": 0.5}},
                    test_policy="natural", n_train_per_class=20, n_val_per_class=4, n_test_per_class=8)
    split = inject_bias(recs, spec, seed=0)
    rep = confounder_report(recs, split)
    assert rep["train"]["age_bin"]["cramers_v"] == pytest.approx(1.0)


def test_injected_axis_dominates_audit():
    rng = np.random.default_rng(9)
    people = [(lab, g, str(rng.choice(AGE_BINS[:6])), str(rng.choice(["en", "it"])))
              for lab in ("positive", "negative") for g in ("male", "female") for _ in range(50)]
    recs = _cohort(people)
    spec = BiasSpec("gender", {"negative": {"female": 0.9, "male": 0.1}, "positive": {"female": 0.1, "male": 0.9}},
                    n_train_per_class=40, n_val_per_class=4, n_test_per_class=8)
    rep = confounder_report(recs, inject_bias(recs, spec, seed=2))["train"]
    assert rep["gender"]["cramers_v"] > max(rep["age_bin"]["cramers_v"], rep["language"]["cramers_v"])


def test_insufficient_cell_is_named():
    recs = _gender_pool(5)
    spec = BiasSpec("gender", {"negative": {"female": 0.9, "male": 0.1}, "positive": {"female": 0.5, "male": 0.5}},
                    n_train_per_class=8)
    with pytest.raises(InsufficientCohort, match="negative, gender=female"):
        inject_bias(recs, spec)


def test_bias_spec_validation():
    with pytest.raises(ValueError):
        BiasSpec("gender", {"positive": {"male": 0.5}, "negative": {"male": 1.0}})
    with pytest.raises(ValueError):
        BiasSpec("height", {"positive": {"a": 1.0}, "negative": {"a": 1.0}})


# ---------------------------------------------------------------- Cramér's V


def test_cramers_v_examples():
    assert cramers_v([[20, 20], [20, 20]]) == 0.0
    assert cramers_v([[25, 0], [0, 25]]) == pytest.approx(1.0)
    # chi2 = 4 * 10^2 / 20 = 20 on n = 80
    assert cramers_v([[30, 10], [10, 30]]) == pytest.approx(0.5, abs=1e-12)
    assert cramers_v([[5, 5]]) == 0.0
    assert cramers_v([[5, 0], [7, 0]]) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_cramers_v_matches_scipy(rows, cols, seed):
    table = np.random.default_rng(seed).integers(1, 40, (rows, cols))
    chi2 = chi2_contingency(table, correction=False)[0]
    expected = np.sqrt(chi2 / (table.sum() * (min(rows, cols) - 1)))
    assert cramers_v(table) == pytest.approx(expected, rel=1e-10, abs=1e-12)
    assert 0.0 <= cramers_v(table) <= 1.0 + 1e-12
