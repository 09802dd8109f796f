import numpy as np
import pytest

from data_lqr_synth.synthesis.problem import AffineExpr, MalformedProblem, MatrixVariable, SdpProblem


class TestAffineExpr:
    def test_matmul_both_sides(self):
        X = MatrixVariable("X", (2, 3))
        left = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, 0.0]])
        right = np.array([[1.0], [1.0], [2.0]])
        expr = left @ AffineExpr.of(X) @ right
        assert expr.shape == (3, 1)
        value = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(expr.evaluate({"X": value}), left @ value @ right)

    def test_transpose_and_constants(self):
        X = MatrixVariable("X", (2, 2))
        expr = (2.0 * AffineExpr.of(X)).T - np.eye(2)
        value = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(expr.evaluate({"X": value}), 2.0 * value.T - np.eye(2))
        np.testing.assert_allclose(expr.evaluate({"X": value}, include_constant=False), 2.0 * value.T)

    def test_shape_checks(self):
        X = AffineExpr.of(MatrixVariable("X", (2, 2)))
        with pytest.raises(MalformedProblem):
            X + np.ones((3, 3))
        with pytest.raises(MalformedProblem):
            np.ones((2, 3)) @ X

    def test_symmetric_variable_must_be_square(self):
        with pytest.raises(MalformedProblem, match="square"):
            MatrixVariable("S", (2, 3), symmetric=True)


class TestSdpProblem:
    def test_block_assembly_is_symmetric(self):
        problem = SdpProblem("demo")
        P = problem.add_variable("P", (2, 2), symmetric=True)
        Y = problem.add_variable("Y", (1, 2))
        lmi = problem.add_psd("lmi", [[P, Y.T],
                                      [AffineExpr.const([[1.0]])]])
        values = {"P": np.eye(2), "Y": np.array([[1.0, 2.0]])}
        full = lmi.assemble(values)
        np.testing.assert_allclose(full, [[1.0, 0.0, 1.0], [0.0, 1.0, 2.0], [1.0, 2.0, 1.0]])

    def test_block_shape_mismatch(self):
        problem = SdpProblem("demo")
        P = problem.add_variable("P", (2, 2), symmetric=True)
        with pytest.raises(MalformedProblem, match="block"):
            problem.add_psd("lmi", [[P, AffineExpr.zeros(2, 3)], [AffineExpr.zeros(1, 1)]])

    def test_undeclared_variable(self):
        other = SdpProblem("other").add_variable("Z", (1, 1))
        problem = SdpProblem("demo")
        with pytest.raises(MalformedProblem, match="undeclared"):
            problem.add_psd("lmi", [[other]])

    def test_duplicate_variable(self):
        problem = SdpProblem("demo")
        problem.add_variable("P", (1, 1))
        with pytest.raises(MalformedProblem):
            problem.add_variable("P", (1, 1))

    def test_objective_value(self):
        problem = SdpProblem("demo")
        problem.add_variable("P", (2, 2), symmetric=True)
        problem.add_variable("V", (1, 1), symmetric=True)
        problem.minimize_trace("P", weight=np.diag([1.0, 2.0]))
        problem.minimize_trace("V", scale=10.0)
        assert problem.objective_value({"P": np.eye(2), "V": [[0.5]]}) == pytest.approx(8.0)


class TestSparseFormat:
    def make_problem(self):
        problem = SdpProblem("scalar")
        x = problem.add_variable("x", (1, 1), symmetric=True)
        y = problem.add_variable("y", (1, 2))
        problem.add_psd("lower", [[x - 1.0]])
        problem.add_equality("fix", y - np.array([[0.5, 0.0]]))
        problem.minimize_trace("x")
        return problem

    def test_layout(self):
        lines = self.make_problem().to_sparse_text().splitlines()
        assert lines[:6] == [
            "sdp-sparse 1",
            "name scalar",
            "var x 1 1 sym 1",
            "var y 1 2 full 2",
            "coords 3",
            "c 1 1.0",
        ]
        assert "psd 1 lower 1" in lines
        assert "f 1 0 1 1 -1.0" in lines
        assert "f 1 1 1 1 1.0" in lines
        assert "eq 1 fix 1 2" in lines
        assert "a 1 0 1 1 -0.5" in lines
        assert "a 1 2 1 1 1.0" in lines
        assert "a 1 3 1 2 1.0" in lines

    def test_floats_round_trip(self):
        problem = SdpProblem("exact")
        x = problem.add_variable("x", (1, 1), symmetric=True)
        problem.add_psd("lower", [[x - 0.1]])
        line = [entry for entry in problem.to_sparse_text().splitlines() if entry.startswith("f 1 0")][0]
        assert float(line.split()[-1]) == -0.1

    def test_write(self, tmp_path):
        problem = self.make_problem()
        path = problem.write_sparse(tmp_path / "problem.txt")
        assert path.read_text(encoding="utf-8") == problem.to_sparse_text()

    def test_symmetric_coordinates(self):
        problem = SdpProblem("sym")
        problem.add_variable("S", (3, 3), symmetric=True)
        assert problem.coordinate_index()[1][1:] == (0, 1)
        assert len(problem.coordinate_index()) == 6
