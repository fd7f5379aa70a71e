import numpy as np
import pandas as pd
import pytest

from dmole.errors import ArtifactError, ContractError
from dmole.metrics import ScoreMatrix, avg, bwt, format_metric, last, summarize, write_summary_csv


def _brute_force(rows):
    n = len(rows)
    out = []
    for i in range(n):
        column = [rows[t][i] for t in range(n)]
        later = [rows[t][i] - rows[i][i] for t in range(i + 1, n)]
        out.append((sum(column) / n, rows[n - 1][i], sum(later) / len(later) if later else None))
    return out


def test_metrics_match_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        rows = rng.uniform(0, 1, size=(n, n))
        for i, (exp_avg, exp_last, exp_bwt) in enumerate(_brute_force(rows.tolist())):
            assert avg(rows, i) == pytest.approx(exp_avg)
            assert last(rows, i) == pytest.approx(exp_last)
            if exp_bwt is None:
                assert bwt(rows, i) is None
            else:
                assert bwt(rows, i) == pytest.approx(exp_bwt)


def test_bwt_sign():
    forgetting = [[0.9, 0.0], [0.5, 0.8]]
    improving = [[0.5, 0.0], [0.7, 0.8]]
    assert bwt(forgetting, 0) == pytest.approx(-0.4)
    assert bwt(improving, 0) == pytest.approx(0.2)


def test_single_task_stream_has_undefined_bwt():
    scores = ScoreMatrix(['only'], rows=np.array([[0.7]]), zero_shot_row=np.array([0.25]))
    summary = summarize(scores)
    assert summary['per_task'][0]['bwt'] is None
    assert summary['average']['bwt'] is None
    assert format_metric(summary['average']['bwt']) == '-'
    assert summary['average']['last'] == pytest.approx(0.7)


def test_score_matrix_rows_and_completeness():
    scores = ScoreMatrix(['a', 'b'])
    assert not scores.is_complete()
    scores.set_row(0, [0.2, 0.3])
    scores.set_row(1, [0.9, 0.3])
    assert not scores.is_complete()
    scores.set_row(2, [0.8, 0.95])
    assert scores.is_complete()
    with pytest.raises(ContractError):
        scores.set_row(1, [0.1])


def test_score_matrix_csv_is_exact(tmp_path):
    rng = np.random.default_rng(1)
    scores = ScoreMatrix(['x', 'y', 'z'], rows=rng.uniform(size=(3, 3)), zero_shot_row=rng.uniform(size=3))
    loaded = ScoreMatrix.load_csv(scores.save_csv(tmp_path / 'score_matrix.csv'))
    assert loaded.task_names == ['x', 'y', 'z']
    np.testing.assert_array_equal(loaded.rows, scores.rows)
    np.testing.assert_array_equal(loaded.zero_shot_row, scores.zero_shot_row)


def test_malformed_score_matrix(tmp_path):
    path = tmp_path / 'score_matrix.csv'
    path.write_text('after_task,a,b\n0,0.1,0.2\n', encoding='utf-8')
    with pytest.raises(ArtifactError, match='score_matrix.csv'):
        ScoreMatrix.load_csv(path)


def test_summary_csv_schema(tmp_path):
    scores = ScoreMatrix(['a', 'b'], rows=np.array([[0.9, 0.1], [0.6, 0.8]]), zero_shot_row=np.zeros(2))
    frame = pd.read_csv(write_summary_csv(scores, tmp_path / 'summary.csv'), keep_default_na=False)
    assert list(frame.columns) == ['task_id', 'task_name', 'avg', 'last', 'bwt']
    assert list(frame['task_id'].astype(str)) == ['1', '2', 'average']
    assert float(frame.loc[0, 'bwt']) == pytest.approx(-0.3)
    assert frame.loc[1, 'bwt'] == ''
    assert float(frame.loc[2, 'avg']) == pytest.approx((0.75 + 0.45) / 2)
