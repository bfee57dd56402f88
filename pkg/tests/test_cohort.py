import numpy as np
import pytest

from gapstride.cohort import (COVARIATE_NAMES, NEVER_OBSERVED_RECENCY, SENTINEL_ID,
                              CohortError, StaticRecord, SyntheticConfig, VisitRecord,
                              CohortTable, build_anchors, compute_train_stats, decayed_slope,
                              generate_synthetic, ingest_long_table, parse_tables,
                              read_anchors, select_outcome_visit, standardize,
                              summarize_cohort, write_anchors)

STATIC = "participant_id,age,sex,education,apoe4\nP1,70,0,16,1\n"


def visits_csv(rows):
    return "participant_id,visit_month,variable,value\n" + "".join(
        f"{p},{m},{v},{x}\n" for p, m, v, x in rows)


def make_cohort(rows, static=STATIC):
    return parse_tables(visits_csv(rows), static)


def test_ingest_sorts_rows():
    c = make_cohort([("P1", 6.0, "CDRSB", 2.0), ("P1", 0.0, "CDRSB", 1.0)])
    assert [r.visit_month for r in c.visits] == [0.0, 6.0]


def test_duplicate_record_rejected_with_line_numbers():
    with pytest.raises(CohortError, match="lines 2 and 3"):
        make_cohort([("P1", 6.0, "CDRSB", 2.0), ("P1", 6.0, "CDRSB", 2.5)])


def test_unknown_variable_rejected():
    with pytest.raises(CohortError, match="CDRSB_TYPO"):
        make_cohort([("P1", 0.0, "CDRSB_TYPO", 1.0)])


def test_missing_static_record_rejected():
    with pytest.raises(CohortError, match="P2"):
        make_cohort([("P2", 0.0, "CDRSB", 1.0)])


def test_bad_apoe4_rejected():
    with pytest.raises(CohortError):
        make_cohort([("P1", 0.0, "CDRSB", 1.0)], "participant_id,age,sex,education,apoe4\nP1,70,0,16,3\n")


def test_comment_lines_skipped(tmp_path):
    c = make_cohort([("P1", 0.0, "CDRSB", 1.0)])
    c.write(tmp_path / "v.csv", tmp_path / "s.csv", header="config_digest=abc seed=1")
    assert (tmp_path / "v.csv").read_text().startswith("# config_digest=abc")
    back = ingest_long_table(tmp_path / "v.csv", tmp_path / "s.csv")
    assert back.visits == c.visits


def mci_rows(months, cdr=None, extra=()):
    rows = []
    for i, m in enumerate(months):
        rows.append(("P1", m, "DX", 1.0 if i == 0 else 2.0))
        rows.append(("P1", m, "CDRSB", 1.0 + m / 10 if cdr is None else cdr[i]))
    return rows + list(extra)


def test_outcome_closest_to_24():
    anchors = build_anchors(make_cohort(mci_rows([0.0, 20.0, 26.0])))
    assert len(anchors) == 1
    assert anchors[0].gap_months == 26.0
    assert anchors[0].y == pytest.approx(2.6)


def test_outcome_tie_goes_to_earlier_visit():
    assert select_outcome_visit(0.0, [0.0, 20.0, 28.0]) == 20.0
    anchors = build_anchors(make_cohort(mci_rows([0.0, 20.0, 28.0])))
    assert anchors[0].gap_months == 20.0


def test_no_visit_in_window_gives_no_sample():
    anchors = build_anchors(make_cohort(mci_rows([0.0, 12.0, 36.0])))
    assert len(anchors) == 0
    assert anchors.exclusions["no_outcome_visit"] == 1


def test_window_bounds_inclusive():
    assert select_outcome_visit(0.0, [18.0]) == 18.0
    assert select_outcome_visit(0.0, [30.0]) == 30.0
    assert select_outcome_visit(0.0, [17.99, 30.01]) is None


def test_history_is_pre_anchor_and_sentinel_when_empty():
    rows = mci_rows([0.0, 24.0])
    a = build_anchors(make_cohort(rows))[0]
    assert all(t.tau <= 0 for t in a.history)
    assert {t.tau for t in a.history} == {0.0}
    from gapstride.cohort import anchor_history
    assert anchor_history([], 0.0)[0].k == SENTINEL_ID


def test_never_observed_modality_uses_sentinel_recency():
    a = build_anchors(make_cohort(mci_rows([0.0, 24.0])))[0]
    assert a.x["mri_missing"] == 1.0
    assert a.x["mri_recency_months"] == NEVER_OBSERVED_RECENCY
    assert set(COVARIATE_NAMES) <= set(a.x)


def test_summary_single_anchor_mri_at_anchor():
    rows = mci_rows([0.0, 24.0], extra=[("P1", 0.0, "Hippocampus", 6000.0)])
    c = make_cohort(rows)
    s = summarize_cohort(build_anchors(c), c)
    assert s.same_visit_mri_pct == 100.0 and s.any_prior_mri_pct == 100.0
    assert s.same_visit_csf_pct == 0.0
    assert s.n_rows == 2


def test_summary_median_gap_of_two():
    static = STATIC + "P2,70,1,12,0\n"
    rows = mci_rows([0.0, 20.0]) + [("P2", 0.0, "DX", 1.0), ("P2", 0.0, "CDRSB", 1.0),
                                     ("P2", 26.0, "CDRSB", 2.0)]
    c = make_cohort(rows, static)
    s = summarize_cohort(build_anchors(c), c)
    assert s.n_anchors == 2
    assert s.median_gap_months == 23.0


def test_summary_empty():
    s = summarize_cohort([], None)
    assert s.n_anchors == 0 and s.median_gap_months is None


def test_anchor_jsonl_round_trip(tmp_path, small_anchors):
    write_anchors(tmp_path / "a.jsonl", small_anchors[:5])
    assert read_anchors(tmp_path / "a.jsonl") == small_anchors[:5]


def test_synthetic_deterministic():
    cfg = SyntheticConfig(n_participants=20, seed=11)
    assert generate_synthetic(cfg).to_csv() == generate_synthetic(cfg).to_csv()


def test_synthetic_anti_leakage_and_window(small_cohort, small_anchors):
    assert len(small_anchors) > 50
    for a in small_anchors:
        assert max(t.tau for t in a.history) <= 0
        assert 18.0 <= a.gap_months <= 30.0
        months = sorted({r.visit_month for r in small_cohort.records(a.participant_id)})
        closer = [m for m in months if 18 <= m - a.anchor_month <= 30
                  and abs(m - a.anchor_month - 24) < abs(a.gap_months - 24)]
        assert not closer


def test_covariates_only_use_past(small_cohort, small_anchors):
    # truncating every participant's records after the anchor leaves x unchanged
    from gapstride.cohort import _visits, anchor_covariates

    for a in small_anchors[:40]:
        recs = [r for r in small_cohort.records(a.participant_id) if r.visit_month <= a.anchor_month]
        by = _visits(recs)
        x = anchor_covariates(small_cohort.static[a.participant_id], by, a.anchor_month,
                              a.anchor_month + a.gap_months)
        assert x == a.x


def test_any_prior_at_least_same_visit(small_cohort, small_anchors):
    s = summarize_cohort(small_anchors, small_cohort)
    assert s.any_prior_mri_pct >= s.same_visit_mri_pct
    assert s.any_prior_csf_pct >= s.same_visit_csf_pct


def test_csf_availability_near_configured_rate():
    cfg = SyntheticConfig(n_participants=500, csf_prob=0.6, seed=5)
    anchors = build_anchors(generate_synthetic(cfg))
    s = summarize_cohort(anchors)
    assert abs(s.any_prior_csf_pct - 60.0) <= 10.0


def test_zero_signal_target_is_participant_rate_times_gap():
    cfg = SyntheticConfig(n_participants=60, signal_strength=0.0, cdrsb_noise_sd=0.0, seed=2)
    anchors = list(build_anchors(generate_synthetic(cfg)))
    rate = {}
    for a in anchors:
        r = rate.setdefault(a.participant_id, a.y / a.gap_months)
        # CDR-SB is stored to 3 decimals, so allow rounding slack
        assert abs(a.y - r * a.gap_months) <= 3e-3


def test_planted_signal_breaks_constant_rate():
    cfg = SyntheticConfig(n_participants=60, cdrsb_noise_sd=0.0, seed=2)
    anchors = list(build_anchors(generate_synthetic(cfg)))
    rate, worst = {}, 0.0
    for a in anchors:
        r = rate.setdefault(a.participant_id, a.y / a.gap_months)
        worst = max(worst, abs(a.y - r * a.gap_months))
    assert worst > 0.1


def test_decayed_slope():
    assert decayed_slope([0.0], [1.0], 0.0, 0.1) == 0.0
    # single slope of 1 unit over 6 months is 2 per year
    assert decayed_slope([0.0, 6.0], [0.0, 1.0], 6.0, 0.1) == pytest.approx(2.0)


def test_train_stats_and_standardize(small_anchors):
    stats = compute_train_stats(small_anchors)
    assert set(stats) == set(range(1, 16))
    assert all(sd > 0 for _, sd in stats.values())
    assert standardize(SENTINEL_ID, 5.0, stats) == 0.0
    mu, sd = stats[1]
    assert standardize(1, mu + 100 * sd, stats) == 6.0


def test_synthetic_config_validation():
    with pytest.raises(CohortError):
        generate_synthetic(SyntheticConfig(csf_prob=1.5))
