import json
import os

import numpy as np
import pytest

from hyperlista.problems import (DimensionMismatchError, GenConfig, MalformedHeaderError,
                                 ProblemSetup, TruncatedPayloadError, export_instances_csv,
                                 generate_dictionary, generate_instances, load_problem,
                                 pseudoinverse, save_problem, sidecar_path)


def test_dictionary_columns_unit_norm():
    A = generate_dictionary(250, 500, 3)
    np.testing.assert_allclose(np.linalg.norm(A, axis=0), 1.0, atol=1e-12)


def test_scalar_dictionary():
    A = generate_dictionary(1, 1, 9)
    assert A.shape == (1, 1) and abs(A[0, 0]) == 1.0


def test_dictionary_deterministic():
    assert generate_dictionary(4, 8, 42).tobytes() == generate_dictionary(4, 8, 42).tobytes()
    assert not np.array_equal(generate_dictionary(4, 8, 42), generate_dictionary(4, 8, 43))


def test_dictionary_rejects_bad_dims():
    with pytest.raises(ValueError):
        generate_dictionary(0, 3, 1)


def test_pseudoinverse_reproduces_A():
    A = generate_dictionary(30, 60, 0)
    Ap = pseudoinverse(A)
    err = np.linalg.norm(A @ Ap @ A - A) / np.linalg.norm(A)
    assert err <= 1e-8
    np.testing.assert_allclose(Ap, np.linalg.pinv(A), atol=1e-10)


def test_support_sizes_follow_binomial():
    setup = ProblemSetup.from_dictionary(generate_dictionary(50, 500, 0))
    insts = generate_instances(setup, GenConfig(50, 500, seed=1, count=2048))
    sizes = np.array([np.count_nonzero(i.x_star) for i in insts])
    # mean of 2048 binomial(500, 0.1) draws; 3 sigma band of the mean
    band = 3 * np.sqrt(500 * 0.1 * 0.9 / 2048)
    assert abs(sizes.mean() - 50) <= max(band, 3.0)


def test_noiseless_and_constant_mode():
    setup = ProblemSetup.from_dictionary(generate_dictionary(50, 100, 0))
    insts = generate_instances(setup, GenConfig(50, 100, nonzero_mode="constant", count=50))
    for inst in insts:
        assert np.all(inst.epsilon == 0)
        assert np.array_equal(inst.b, setup.A @ inst.x_star)
        nz = inst.x_star[inst.x_star != 0]
        assert nz.size > 0 and np.all(nz == 1.0)


def test_snr_is_exact():
    setup = ProblemSetup.from_dictionary(generate_dictionary(40, 80, 0))
    insts = generate_instances(setup, GenConfig(40, 80, snr_db=30.0, seed=2, count=1000))
    snr = [10 * np.log10(np.sum((setup.A @ i.x_star) ** 2) / np.sum(i.epsilon ** 2))
           for i in insts]
    assert abs(np.mean(snr) - 30.0) <= 0.1
    np.testing.assert_allclose(snr, 30.0, atol=1e-9)


def test_zero_signals_are_redrawn():
    setup = ProblemSetup.from_dictionary(generate_dictionary(3, 4, 0))
    insts = generate_instances(setup, GenConfig(3, 4, sparsity_p=0.01, count=200, seed=4))
    assert all(np.any(i.x_star != 0) for i in insts)


def test_sigma_rescales_the_same_draws():
    setup = ProblemSetup.from_dictionary(generate_dictionary(20, 40, 0))
    a = generate_instances(setup, GenConfig(20, 40, seed=8, count=20))
    b = generate_instances(setup, GenConfig(20, 40, magnitude_sigma=2.0, seed=8, count=20))
    for x, y in zip(a, b):
        assert np.array_equal(2 * x.x_star, y.x_star)


def test_generation_deterministic_and_dims_checked():
    setup = ProblemSetup.from_dictionary(generate_dictionary(20, 40, 0))
    cfg = GenConfig(20, 40, snr_db=20.0, seed=5, count=5)
    a, b = generate_instances(setup, cfg), generate_instances(setup, cfg)
    assert all(np.array_equal(x.b, y.b) for x, y in zip(a, b))
    with pytest.raises(DimensionMismatchError):
        generate_instances(setup, GenConfig(20, 41))


@pytest.mark.parametrize("bad", [dict(sparsity_p=0.0), dict(sparsity_p=1.0),
                                 dict(magnitude_sigma=0.0), dict(nonzero_mode="laplace"),
                                 dict(count=-1)])
def test_genconfig_validation(bad):
    with pytest.raises(ValueError):
        GenConfig(10, 20, **bad)


def test_roundtrip_bit_exact(tmp_path, small_setup):
    insts = generate_instances(small_setup, GenConfig(20, 40, snr_db=10.0, seed=3, count=7))
    path = tmp_path / "d.bin"
    save_problem(path, small_setup, insts, {"note": "x"})
    ds = load_problem(path)
    for name in ("A", "A_pinv", "W", "D", "G"):
        assert getattr(ds.setup, name).tobytes() == getattr(small_setup, name).tobytes()
    assert ds.setup.mu == small_setup.mu
    for x, y in zip(insts, ds.instances):
        for f in ("x_star", "epsilon", "b"):
            assert getattr(x, f).tobytes() == getattr(y, f).tobytes()
    assert ds.meta == {"note": "x"}


def test_roundtrip_without_instances(tmp_path):
    setup = ProblemSetup.from_dictionary(generate_dictionary(5, 7, 0))
    save_problem(tmp_path / "s.bin", setup)
    ds = load_problem(tmp_path / "s.bin")
    assert ds.instances == [] and ds.setup.W is None and ds.setup.mu is None


def _saved(tmp_path):
    setup = ProblemSetup.from_dictionary(generate_dictionary(6, 10, 0))
    insts = generate_instances(setup, GenConfig(6, 10, count=3))
    path = tmp_path / "d.bin"
    save_problem(path, setup, insts)
    return path


def test_empty_file_is_malformed(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    with pytest.raises(MalformedHeaderError):
        load_problem(path)
    open(sidecar_path(path), "w").close()
    with pytest.raises(MalformedHeaderError) as err:
        load_problem(path)
    assert err.value.code == "malformed-header"


def test_header_dims_disagree_with_payload(tmp_path):
    path = _saved(tmp_path)
    header = json.loads(open(sidecar_path(path)).read())
    header["n"] = 11
    open(sidecar_path(path), "w").write(json.dumps(header))
    with pytest.raises(DimensionMismatchError) as err:
        load_problem(path)
    assert err.value.code == "dimension-mismatch"


def test_payload_for_smaller_n(tmp_path):
    # header and sections describe n=10 but the blob holds data sized for n=9
    path = _saved(tmp_path)
    small = ProblemSetup.from_dictionary(generate_dictionary(6, 9, 0))
    other = tmp_path / "o.bin"
    save_problem(other, small, generate_instances(small, GenConfig(6, 9, count=3)))
    os.replace(other, path)
    with pytest.raises(DimensionMismatchError) as err:
        load_problem(path)
    assert err.value.code == "dimension-mismatch"


def test_truncated_and_oversized_payload(tmp_path):
    path = _saved(tmp_path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(TruncatedPayloadError) as err:
        load_problem(path)
    assert err.value.code == "truncated-payload"
    path.write_bytes(blob + b"\0" * 8)
    with pytest.raises(DimensionMismatchError):
        load_problem(path)


def test_csv_export(tmp_path):
    setup = ProblemSetup.from_dictionary(generate_dictionary(3, 4, 0))
    insts = generate_instances(setup, GenConfig(3, 4, sparsity_p=0.5, count=2))
    export_instances_csv(tmp_path / "i.csv", insts)
    rows = (tmp_path / "i.csv").read_text().strip().splitlines()
    assert rows[0] == "instance,vector,index,value"
    assert len(rows) == 1 + 2 * (4 + 3 + 3)
