"""SDPA sparse format (.dat-s) export/import and the matching solution layout."""
import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse

from app.config import settings
from app.services.sdp import Block, SdpError, SdpProblem, SdpSolution, compute_residuals
from app.utils import format_number

logger = logging.getLogger(__name__)

_SEPARATORS = str.maketrans({c: " " for c in "{}(),"})


def _split_free(problem: SdpProblem) -> bool:
    return problem.n_free > 0


def export_sdpa(problem: SdpProblem) -> str:
    """SDPA sparse text: F0 = C, F_i = constraint i, c = b; free variables split into one diagonal block."""
    sizes = [b.size if b.kind == "psd" else -b.size for b in problem.blocks]
    if _split_free(problem):
        sizes.append(-2 * problem.n_free)
    lines = [
        str(problem.m),
        str(len(sizes)),
        " ".join(str(s) for s in sizes),
        " ".join(format_number(v) for v in problem.b),
    ]
    entries: List[Tuple[int, int, int, int, float]] = []
    for k, (block, Ck) in enumerate(zip(problem.blocks, problem.C), start=1):
        if block.kind == "diag":
            for a in np.flatnonzero(Ck):
                entries.append((0, k, a + 1, a + 1, Ck[a]))
        else:
            for a, b in zip(*np.nonzero(np.triu(Ck))):
                entries.append((0, k, a + 1, b + 1, Ck[a, b]))
    split = len(problem.blocks) + 1
    if _split_free(problem):
        for j in np.flatnonzero(problem.c):
            entries.append((0, split, j + 1, j + 1, problem.c[j]))
            entries.append((0, split, problem.n_free + j + 1, problem.n_free + j + 1, -problem.c[j]))
    for k, (block, A) in enumerate(zip(problem.blocks, problem.A), start=1):
        coo = A.tocoo()
        for i, col, v in zip(coo.row, coo.col, coo.data):
            if v == 0.0:
                continue
            if block.kind == "diag":
                entries.append((i + 1, k, col + 1, col + 1, v))
                continue
            a, b = divmod(int(col), block.size)
            if a <= b:
                entries.append((i + 1, k, a + 1, b + 1, v))
    if _split_free(problem):
        coo = problem.F.tocoo()
        for i, j, v in zip(coo.row, coo.col, coo.data):
            if v == 0.0:
                continue
            entries.append((i + 1, split, j + 1, j + 1, v))
            entries.append((i + 1, split, problem.n_free + j + 1, problem.n_free + j + 1, -v))
    entries.sort(key=lambda e: e[:4])
    for matno, blkno, i, j, v in entries:
        lines.append(f"{matno} {blkno} {i} {j} {format_number(v)}")
    return "\n".join(lines) + "\n"


def _tokens(text: str, comment: str) -> List[Tuple[str, int]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in comment:
            continue
        for token in line.translate(_SEPARATORS).split():
            out.append((token, lineno))
    return out


class _Reader:
    def __init__(self, tokens: List[Tuple[str, int]], last_line: int):
        self.tokens = tokens
        self.pos = 0
        self.last_line = last_line

    def remaining(self) -> int:
        return len(self.tokens) - self.pos

    def next(self, what: str, cast=float):
        if self.pos >= len(self.tokens):
            raise SdpError(f"unexpected end of file, expected {what}", self.last_line)
        token, line = self.tokens[self.pos]
        self.pos += 1
        try:
            return cast(token) if cast is not int else int(float(token))
        except ValueError:
            raise SdpError(f"expected {what}, got {token!r}", line)

    @property
    def line(self) -> int:
        return self.tokens[min(self.pos, len(self.tokens) - 1)][1] if self.tokens else self.last_line


def import_sdpa(text: str) -> SdpProblem:
    """Read SDPA sparse text; negative block sizes become diagonal blocks."""
    reader = _Reader(_tokens(text, '"*'), len(text.splitlines()))
    m = reader.next("constraint count", int)
    nblocks = reader.next("block count", int)
    sizes = [reader.next("block size", int) for _ in range(nblocks)]
    b = np.array([reader.next("objective coefficient") for _ in range(m)])
    blocks = [
        Block(f"block{k + 1}", abs(s), "psd" if s > 0 else "diag") for k, s in enumerate(sizes)
    ]
    C = [np.zeros((bl.size, bl.size)) if bl.kind == "psd" else np.zeros(bl.size) for bl in blocks]
    triplets = [([], [], []) for _ in blocks]
    while reader.remaining():
        line = reader.line
        if reader.remaining() < 5:
            raise SdpError("incomplete entry (expected matno blkno i j value)", line)
        matno = reader.next("matrix number", int)
        blkno = reader.next("block number", int)
        i = reader.next("row index", int)
        j = reader.next("column index", int)
        v = reader.next("entry value")
        if not (0 <= matno <= m and 1 <= blkno <= nblocks):
            raise SdpError(f"entry refers to matrix {matno} block {blkno}", line)
        block = blocks[blkno - 1]
        if not (1 <= i <= block.size and 1 <= j <= block.size):
            raise SdpError(f"index ({i}, {j}) outside block {blkno} of size {block.size}", line)
        a, c = min(i, j) - 1, max(i, j) - 1
        if block.kind == "diag":
            if a != c:
                raise SdpError("off-diagonal entry in a diagonal block", line)
            if matno == 0:
                C[blkno - 1][a] += v
            else:
                rows, cols, vals = triplets[blkno - 1]
                rows.append(matno - 1)
                cols.append(a)
                vals.append(v)
            continue
        if matno == 0:
            C[blkno - 1][a, c] = C[blkno - 1][c, a] = v
            continue
        rows, cols, vals = triplets[blkno - 1]
        rows.append(matno - 1)
        cols.append(a * block.size + c)
        vals.append(v)
        if a != c:
            rows.append(matno - 1)
            cols.append(c * block.size + a)
            vals.append(v)
    A = []
    for block, (rows, cols, vals) in zip(blocks, triplets):
        width = block.size if block.kind == "diag" else block.size * block.size
        A.append(sparse.csr_matrix((vals, (rows, cols)), shape=(m, width)))
    problem = SdpProblem(
        blocks=blocks,
        A=A,
        F=sparse.csr_matrix((m, 0)),
        b=b,
        C=C,
        c=np.zeros(0),
    )
    logger.info(f"Imported SDPA problem: {m} constraints, {nblocks} blocks")
    return problem


def _split_values(y: np.ndarray) -> np.ndarray:
    return np.concatenate([np.maximum(y, 0.0), np.maximum(-y, 0.0)])


def export_solution(problem: SdpProblem, solution: SdpSolution) -> str:
    """Solution layout: objective pair, dual vector, then matno 1 = slack Z and matno 2 = X entries."""
    lines = [
        "* passicert SDP solution",
        f"* status {solution.status}",
        f"{format_number(solution.primal_objective)} {format_number(solution.dual_objective)}",
        " ".join(format_number(v) for v in solution.dual),
    ]
    matrices = [("1", solution.Z), ("2", solution.X)]
    for matno, values in matrices:
        for k, (block, V) in enumerate(zip(problem.blocks, values), start=1):
            if block.kind == "diag":
                for a in np.flatnonzero(V):
                    lines.append(f"{matno} {k} {a + 1} {a + 1} {format_number(V[a])}")
            else:
                for a, b in zip(*np.nonzero(np.triu(V))):
                    lines.append(f"{matno} {k} {a + 1} {b + 1} {format_number(V[a, b])}")
        if _split_free(problem):
            if matno == "1":
                slack = problem.F.T @ solution.dual - problem.c
                diag = np.concatenate([slack, -slack])
            else:
                diag = _split_values(solution.y)
            for a in np.flatnonzero(diag):
                lines.append(f"{matno} {len(problem.blocks) + 1} {a + 1} {a + 1} {format_number(diag[a])}")
    return "\n".join(lines) + "\n"


def import_solution(text: str, problem: SdpProblem, tol: Optional[float] = None) -> SdpSolution:
    """Read a solution for `problem`; residuals are recomputed from the values, never read from the file."""
    tol = settings.solver_tol if tol is None else tol
    reader = _Reader(_tokens(text, "*"), len(text.splitlines()))
    pobj_file = reader.next("primal objective")
    dobj_file = reader.next("dual objective")
    dual = np.array([reader.next("dual value") for _ in range(problem.m)])
    X = [np.zeros((bl.size, bl.size)) if bl.kind == "psd" else np.zeros(bl.size) for bl in problem.blocks]
    Z = [x.copy() for x in X]
    split = np.zeros(2 * problem.n_free)
    nblocks = len(problem.blocks) + (1 if _split_free(problem) else 0)
    while reader.remaining():
        line = reader.line
        if reader.remaining() < 5:
            raise SdpError("incomplete entry (expected matno blkno i j value)", line)
        matno = reader.next("matrix number", int)
        blkno = reader.next("block number", int)
        i = reader.next("row index", int) - 1
        j = reader.next("column index", int) - 1
        v = reader.next("entry value")
        if matno not in (1, 2) or not 1 <= blkno <= nblocks:
            raise SdpError(f"entry refers to matrix {matno} block {blkno}", line)
        if blkno > len(problem.blocks):
            if matno == 2:
                if not (i == j and 0 <= i < split.shape[0]):
                    raise SdpError(f"bad index ({i + 1}, {j + 1}) in the free-variable block", line)
                split[i] = v
            continue
        block = problem.blocks[blkno - 1]
        if not (0 <= i < block.size and 0 <= j < block.size):
            raise SdpError(f"index ({i + 1}, {j + 1}) outside block {blkno} of size {block.size}", line)
        target = Z if matno == 1 else X
        if block.kind == "diag":
            target[blkno - 1][i] = v
        else:
            target[blkno - 1][i, j] = target[blkno - 1][j, i] = v
    y = split[: problem.n_free] - split[problem.n_free:]
    residuals = compute_residuals(problem, X, y, dual, Z)
    status = "optimal" if max(residuals.values()) <= tol else "stalled"
    logger.info(f"Imported SDP solution ({status}); file objectives {pobj_file:.6g} / {dobj_file:.6g}")
    return SdpSolution(
        status=status,
        X=X,
        Z=Z,
        y=y,
        dual=dual,
        primal_objective=problem.objective(X, y),
        dual_objective=float(problem.b @ dual),
        iterations=0,
        residuals=residuals,
        free_labels=list(problem.free_labels),
    )
