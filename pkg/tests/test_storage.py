import numpy as np
import pytest

from qsmp import bsde, paths, storage


@pytest.fixture(scope="module")
def solved(exp_utility_spec):
    grid = paths.TimeGrid(12, 1.0)
    noise = paths.simulate_brownian(grid, 40, 1, seed=61)
    forward = paths.solve_forward_sde(exp_utility_spec, grid, noise, paths.ConstantControl((0.2,)))
    backward = bsde.solve_quadratic_bsde(exp_utility_spec, grid, noise, forward)
    return grid, forward, backward


class TestContainer:
    def test_round_trip(self, tmp_path, solved):
        grid, forward, backward = solved
        path = str(tmp_path / "solution.qsmp")
        storage.save_solution(path, grid, forward, backward)
        meta, arrays = storage.load_container(path)
        assert meta["M"] == forward.states.shape[0]
        assert meta["N"] == grid.N
        assert meta["dt"] == pytest.approx(grid.dt)
        assert np.array_equal(arrays["states"], forward.states)
        assert np.array_equal(arrays["controls"], forward.controls)
        assert np.array_equal(arrays["Y"], backward.Y)
        assert np.array_equal(arrays["Z"], backward.Z)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.qsmp"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(ValueError):
            storage.load_container(str(path))

    def test_deterministic_bytes(self, tmp_path, solved):
        grid, forward, backward = solved
        p1 = str(tmp_path / "a.qsmp")
        p2 = str(tmp_path / "b.qsmp")
        storage.save_solution(p1, grid, forward, backward)
        storage.save_solution(p2, grid, forward, backward)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_long_name_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            storage.save_container(str(tmp_path / "x.qsmp"), {"a" * 40: 1.0}, {})


class TestCsvExport:
    def test_paths_export_parses_back(self, tmp_path, solved):
        grid, forward, backward = solved
        path = tmp_path / "paths.csv"
        storage.export_paths_csv(str(path), grid, forward, backward, max_paths=5)
        lines = path.read_text().strip().split("\n")
        header = lines[0].split(",")
        assert header == ["path", "step", "t", "x1", "u1", "Y", "Z1"]
        assert len(lines) == 1 + 5 * (grid.N + 1)
        first = lines[1].split(",")
        assert float(first[3]) == forward.states[0, 0, 0]
        # shortest round-trip float formatting: parsing back is exact
        assert float(lines[2].split(",")[6]) == backward.Z[0, 1, 0]

    def test_regression_coefficients_export(self, tmp_path, solved):
        grid, forward, backward = solved
        path = tmp_path / "coeffs.csv"
        storage.export_regression_coefficients(str(path), backward)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "step,target,feature,coefficient"
        # one block per step and target with one row per feature
        n_feats = backward.basis.feature_count(1)
        assert len(lines) - 1 == grid.N * n_feats * 2  # y and one z component
