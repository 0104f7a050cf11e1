import gzip
import json
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from qhgm.data import (BetaBinModel, DatasetFormatError, beta_models, bin_pseudotime, bins_for, decode_base4,
                       dequantize, dequantize_dataset, discretize, encode_base4, ingest_expression, make_bins,
                       read_dataset, read_expression_csv, solve_beta_concentration, write_dataset,
                       write_expression_csv)
from qhgm.model import Dataset
from qhgm.povm import build_sic_povm


def test_default_bin_edges(povm):
    np.testing.assert_allclose(bins_for(povm).edges, [0, 0.158494, 0.5, 0.841506, 1], atol=1e-6)


def test_uniform_bins():
    np.testing.assert_allclose(make_bins([0.125, 0.375, 0.625, 0.875]).edges, [0, 0.25, 0.5, 0.75, 1])


def test_sic_scores_rejected():
    with pytest.raises(ValueError):
        make_bins(build_sic_povm().scores)


def test_discretize_examples(povm):
    bins = bins_for(povm)
    assert discretize(0.0, bins) == 0
    assert discretize(0.5, bins) == 2
    assert discretize(0.9, bins) == 3
    assert discretize(1.0, bins) == 3
    np.testing.assert_array_equal(discretize(povm.scores, bins), [0, 1, 2, 3])
    with pytest.raises(ValueError):
        discretize(1.01, bins)
    with pytest.raises(ValueError):
        discretize([0.2, -0.1], bins)


def test_bin_pseudotime_examples():
    b = bin_pseudotime(np.arange(10.0), 2)
    np.testing.assert_array_equal(b.sizes, [5, 5])
    np.testing.assert_allclose(b.times, [2.0, 7.0])
    assert list(bin_pseudotime(np.arange(7.0), 3).sizes) == [3, 2, 2]
    flat = bin_pseudotime(np.full(6, 0.4), 3)
    np.testing.assert_allclose(flat.times, 0.4)
    # stable ties: equal pseudotimes keep input order
    np.testing.assert_array_equal(flat.members[0], [0, 1])
    with pytest.raises(ValueError):
        bin_pseudotime(np.arange(2.0), 3)
    with pytest.raises(ValueError):
        bin_pseudotime([0.1, np.nan], 1)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=200), st.integers(1, 20))
def test_binning_invariants(pt, n_bins):
    if len(pt) < n_bins:
        return
    b = bin_pseudotime(pt, n_bins)
    assert b.sizes.max() - b.sizes.min() <= 1
    assert np.all(np.diff(b.times) >= 0)
    assert sorted(np.concatenate(b.members).tolist()) == list(range(len(pt)))


def test_encode_examples():
    assert encode_base4(np.array([1, 2, 3])) == 57
    assert encode_base4(np.zeros(5, dtype=int)) == 0
    rng = np.random.default_rng(0)
    m = rng.integers(0, 4, size=(1000, 12))
    np.testing.assert_array_equal(decode_base4(encode_base4(m), 12), m)


def test_encoding_bijective_small():
    codes = np.arange(4**5)
    back = encode_base4(decode_base4(codes, 5))
    np.testing.assert_array_equal(back, codes)


def test_beta_concentration_symmetric():
    c = solve_beta_concentration(0.5)
    a = 1 + 0.5 * (c - 2)
    mass, _ = integrate.quad(lambda z: stats.beta.pdf(z, a, a), 0.025, 0.975)
    assert abs(mass - 0.99) < 1e-6
    assert np.isclose(solve_beta_concentration(0.3), solve_beta_concentration(0.7), rtol=1e-9)


@pytest.mark.parametrize("gamma", [0.1, 0.27, 0.42, 0.5, 0.73, 0.9])
def test_beta_mass_and_mode(gamma):
    model = BetaBinModel(gamma, solve_beta_concentration(gamma))
    assert model.alpha > 1 and model.beta > 1
    mass = stats.beta.cdf(0.975, model.alpha, model.beta) - stats.beta.cdf(0.025, model.alpha, model.beta)
    assert abs(mass - 0.99) < 1e-6
    assert abs(model.mode - gamma) < 1e-8


def test_beta_bracketing_errors():
    with pytest.raises(ValueError):
        solve_beta_concentration(0.0)
    with pytest.raises(ArithmeticError):
        solve_beta_concentration(0.01)  # mode outside the central window


def test_beta_modes_map_to_scores(povm):
    bins = bins_for(povm)
    models = beta_models(bins, povm.scores)
    e = bins.edges
    for m, model in enumerate(models):
        assert abs(e[m] + model.mode * (e[m + 1] - e[m]) - povm.scores[m]) < 1e-6


def test_dequantize_containment_and_stability(povm):
    bins = bins_for(povm)
    models = beta_models(bins, povm.scores)
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 4, size=(200, 7))
    x = dequantize(labels, bins, models, rng)
    lo, hi = bins.edges[labels], bins.edges[labels + 1]
    assert np.all((x >= lo) & (x <= hi))
    np.testing.assert_array_equal(discretize(x, bins), labels)


def test_dequantize_empirical_mode(povm):
    bins = bins_for(povm)
    models = beta_models(bins, povm.scores)
    rng = np.random.default_rng(2)
    for m in range(4):
        x = dequantize(np.full(100_000, m), bins, models, rng)
        hist, edges = np.histogram(x, bins=100, range=(bins.edges[m], bins.edges[m + 1]))
        peak = 0.5 * (edges[hist.argmax()] + edges[hist.argmax() + 1])
        assert abs(peak - povm.scores[m]) < 0.02


def random_dataset(rng, nt=3, nc=5, n=4):
    return Dataset(np.sort(rng.uniform(0.01, 1, nt)), rng.integers(0, 4, size=(nt, nc, n)))


@pytest.mark.parametrize("compress", [False, True])
def test_dataset_roundtrip(tmp_path, rng, compress):
    ds = random_dataset(rng)
    write_dataset(ds, tmp_path / "d", compress=compress)
    back = read_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.outcomes, ds.outcomes)
    np.testing.assert_array_equal(back.times, ds.times)
    back2 = read_dataset(tmp_path / "d" / "dataset.json")
    np.testing.assert_array_equal(back2.outcomes, ds.outcomes)
    if compress:
        assert gzip.decompress((tmp_path / "d" / "dataset.csv.gz").read_bytes()).startswith(b"time_index")


def test_manifest_and_body_errors(tmp_path, rng):
    ds = random_dataset(rng)
    write_dataset(ds, tmp_path / "d")
    mpath = tmp_path / "d" / "dataset.json"
    manifest = json.loads(mpath.read_text())

    del manifest["times"]
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(tmp_path / "d")
    assert err.value.field == "times"

    write_dataset(ds, tmp_path / "d")
    body = tmp_path / "d" / "dataset.csv"
    lines = body.read_text().splitlines()
    body.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(tmp_path / "d")
    assert err.value.field == "rows"

    lines[1] = lines[1][:-1] + "7"
    body.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(tmp_path / "d")
    assert err.value.field == "labels"

    manifest = json.loads(mpath.read_text())
    manifest["format_version"] = 2
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "d")
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "missing")


def test_write_is_deterministic(tmp_path, rng):
    ds = random_dataset(rng)
    write_dataset(ds, tmp_path / "a", compress=True)
    write_dataset(ds, tmp_path / "b", compress=True)
    for name in ("dataset.json", "dataset.csv.gz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_large_dataset_loads_quickly(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(np.sort(rng.uniform(0.01, 1, 65)), rng.integers(0, 4, size=(65, 6000, 12), dtype=np.uint8))
    write_dataset(ds, tmp_path / "big")
    start = time.perf_counter()
    back = read_dataset(tmp_path / "big")
    assert time.perf_counter() - start < 30
    assert back.outcomes.shape == (65, 6000, 12)


def write_csv(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(str(v) for v in r) for r in rows) + "\n")


def test_ingest_handcrafted(tmp_path, povm):
    # edges 0.158494 / 0.5 / 0.841506; pseudotime orders cells c, a | d, b
    rows = [[0.1585, 0.5, 0.3], [0.8416, 0.0, 0.9], [0.1584, 1.0, 0.1], [0.4999, 0.8415, 0.6]]
    write_csv(tmp_path / "e.csv", ["gene_1", "gene_2", "pseudotime"], rows)
    ds, genes = ingest_expression(tmp_path / "e.csv", povm, 2)
    assert genes == ["gene_1", "gene_2"]
    np.testing.assert_allclose(ds.times, [0.2, 0.75])
    np.testing.assert_array_equal(ds.outcomes, [[[0, 3], [1, 2]], [[1, 2], [3, 0]]])


def test_ingest_truncates_to_smallest_bin(tmp_path, povm):
    rows = [[0.2, 0.1 * (k + 1)] for k in range(7)]
    write_csv(tmp_path / "e.csv", ["gene_1", "pseudotime"], rows)
    ds, _ = ingest_expression(tmp_path / "e.csv", povm, 3)
    assert ds.outcomes.shape == (3, 2, 1)


def test_ingest_errors(tmp_path, povm):
    write_csv(tmp_path / "bad.csv", ["gene_1", "pseudotime"], [[1.2, 0.1], [0.3, 0.2]])
    with pytest.raises(DatasetFormatError):
        ingest_expression(tmp_path / "bad.csv", povm, 1)
    write_csv(tmp_path / "nopt.csv", ["gene_1", "gene_2"], [[0.1, 0.2]])
    with pytest.raises(DatasetFormatError) as err:
        ingest_expression(tmp_path / "nopt.csv", povm, 1)
    assert err.value.field == "pseudotime"
    write_csv(tmp_path / "empty.csv", ["gene_1", "gene_2", "pseudotime"], [[0.1, "", 0.2], [0.3, "", 0.4]])
    with pytest.raises(DatasetFormatError) as err:
        ingest_expression(tmp_path / "empty.csv", povm, 1)
    assert err.value.field == "gene_2"


def test_ingest_constant_zero(tmp_path, povm):
    write_csv(tmp_path / "z.csv", ["gene_1", "gene_2", "pseudotime"], [[0.0, 0.0, 0.1 + k] for k in range(6)])
    ds, _ = ingest_expression(tmp_path / "z.csv", povm, 2)
    assert np.all(ds.outcomes == 0)


def test_dequantized_export_reingests(tmp_path, povm, rng):
    ds = random_dataset(rng, nt=3, nc=8, n=3)
    values, times = dequantize_dataset(ds, povm, np.random.default_rng(0))
    write_expression_csv(tmp_path / "x.csv", values, None, times, fmt="%.17g")
    genes, vals, pt = read_expression_csv(tmp_path / "x.csv")
    assert genes == ["gene_1", "gene_2", "gene_3"]
    back, _ = ingest_expression(tmp_path / "x.csv", povm, 3)
    np.testing.assert_array_equal(back.outcomes, ds.outcomes)
    np.testing.assert_allclose(back.times, ds.times)
