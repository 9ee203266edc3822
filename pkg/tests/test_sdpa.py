import numpy as np
import pytest

from app.services.sdp import SdpError, solve_sdp
from app.services.sdpa import export_solution, export_sdpa, import_sdpa, import_solution
from tests.test_sdp import toy, two_by_two, with_free

TOY_SDPA = "1\n1\n1\n1\n0 1 1 1 -1\n1 1 1 1 1\n"


class TestExport:
    def test_toy_golden(self):
        assert export_sdpa(toy()) == TOY_SDPA

    def test_free_variables_split(self):
        text = export_sdpa(with_free()).splitlines()
        assert text[1] == "2"
        assert text[2] == "1 -2"
        assert "1 2 1 1 1" in text
        assert "1 2 2 2 -1" in text
        assert "0 2 1 1 1" in text
        assert "0 2 2 2 -1" in text

    def test_off_diagonal_entries(self):
        lines = export_sdpa(two_by_two()).splitlines()
        assert "1 1 1 2 0.5" in lines
        assert "0 1 1 1 -1" in lines
        assert "0 1 2 2 -1" in lines


class TestImport:
    def test_reads_export(self):
        problem = import_sdpa(TOY_SDPA)
        assert problem.m == 1
        assert problem.blocks[0].size == 1
        np.testing.assert_allclose(problem.C[0], [[-1.0]])
        assert solve_sdp(problem).primal_objective == pytest.approx(-1.0, abs=1e-6)

    def test_symmetric_off_diagonal(self):
        problem = import_sdpa(export_sdpa(two_by_two()))
        A = problem.A[0].toarray().reshape(2, 2)
        np.testing.assert_allclose(A, [[0.0, 0.5], [0.5, 0.0]])

    def test_comments_and_braces(self):
        text = '"toy problem\n* comment\n1\n1\n{1}\n1.0\n0 1 1 1 -1\n1 1 1 1 1\n'
        problem = import_sdpa(text)
        assert problem.b.tolist() == [1.0]

    def test_diagonal_blocks(self):
        problem = import_sdpa("1\n1\n-2\n1\n0 1 1 1 -1\n1 1 1 1 1\n1 1 2 2 1\n")
        assert problem.blocks[0].kind == "diag"
        assert problem.A[0].shape == (1, 2)

    def test_index_outside_block(self):
        with pytest.raises(SdpError) as exc:
            import_sdpa("1\n1\n1\n1\n0 1 2 2 1\n")
        assert exc.value.line == 5

    def test_incomplete_entry(self):
        with pytest.raises(SdpError):
            import_sdpa("1\n1\n1\n1\n0 1 1\n")

    def test_bad_number(self):
        with pytest.raises(SdpError) as exc:
            import_sdpa("1\n1\nabc\n")
        assert exc.value.line == 3


class TestSolutionFiles:
    @pytest.mark.parametrize("factory", [toy, with_free, two_by_two])
    def test_residuals_recomputed(self, factory):
        problem = factory()
        solution = solve_sdp(problem)
        restored = import_solution(export_solution(problem, solution), problem)
        assert restored.status == "optimal"
        np.testing.assert_allclose(restored.y, solution.y, atol=1e-12)
        for a, b in zip(restored.X, solution.X):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_tampered_values_are_caught(self):
        problem = toy()
        solution = solve_sdp(problem)
        text = export_solution(problem, solution).splitlines()
        text = [line for line in text if not line.startswith("2 1 ")] + ["2 1 1 1 3"]
        restored = import_solution("\n".join(text) + "\n", problem)
        assert restored.status == "stalled"
        assert restored.residuals["primal"] > 0.5
