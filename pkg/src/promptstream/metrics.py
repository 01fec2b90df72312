"""Score matrix bookkeeping and the continual-learning metrics.

The score matrix holds macro-F1 (percent) on every task's test split at
every point of the run: row 0 is the untrained baseline, row j the state
after finishing task j. Average F1 reads the last row; backward transfer
compares the last row to the diagonal; forward transfer compares each
task's pre-training zero-shot row to the baseline row.
"""

import csv
import math

import numpy as np


def f1_score(predictions, labels) -> float:
    """Macro F1 over the two classes, in percent."""
    predictions = list(predictions)
    labels = list(labels)
    if not predictions or len(predictions) != len(labels):
        raise ValueError("predictions and labels must be non-empty and aligned")
    scores = []
    for cls in (0, 1):
        tp = sum(1 for p, y in zip(predictions, labels) if p == cls and y == cls)
        fp = sum(1 for p, y in zip(predictions, labels) if p == cls and y != cls)
        fn = sum(1 for p, y in zip(predictions, labels) if p != cls and y == cls)
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return 100.0 * (scores[0] + scores[1]) / 2.0


class ScoreMatrix:
    """(N+1) x N grid of F1 scores; unfilled cells are NaN."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ValueError("need at least one task")
        self.n_tasks = n_tasks
        self.grid = np.full((n_tasks + 1, n_tasks), np.nan)

    def set(self, after_task: int, task: int, f1: float):
        """Record F1 on ``task`` (1-based) after training through ``after_task`` (0 = untrained)."""
        if not 0 <= after_task <= self.n_tasks:
            raise IndexError(f"after_task {after_task} outside 0..{self.n_tasks}")
        if not 1 <= task <= self.n_tasks:
            raise IndexError(f"task {task} outside 1..{self.n_tasks}")
        if not (0.0 <= f1 <= 100.0) or not math.isfinite(f1):
            raise ValueError(f"F1 must lie in [0, 100], got {f1}")
        self.grid[after_task, task - 1] = f1

    def get(self, after_task: int, task: int) -> float:
        return float(self.grid[after_task, task - 1])

    def to_csv(self, path):
        """Header = task ids; first column labels the row (0 = "baseline")."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["after"] + [str(i) for i in range(1, self.n_tasks + 1)])
            for j in range(self.n_tasks + 1):
                label = "baseline" if j == 0 else str(j)
                row = [
                    "" if math.isnan(self.grid[j, i]) else repr(float(self.grid[j, i]))
                    for i in range(self.n_tasks)
                ]
                writer.writerow([label] + row)

    @classmethod
    def from_csv(cls, path) -> "ScoreMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        n_tasks = len(rows[0]) - 1
        matrix = cls(n_tasks)
        for j, row in enumerate(rows[1:]):
            for i, cell in enumerate(row[1:]):
                if cell != "":
                    matrix.grid[j, i] = float(cell)
        return matrix


def _require(matrix: ScoreMatrix, cells, what: str):
    for j, i in cells:
        if math.isnan(matrix.grid[j, i - 1]):
            raise ValueError(f"{what} needs cell (after={j}, task={i}) which is unfilled")


def avg_f1(matrix: ScoreMatrix) -> float:
    """Mean F1 over all tasks after the final task."""
    n = matrix.n_tasks
    _require(matrix, [(n, i) for i in range(1, n + 1)], "avg_f1")
    return float(matrix.grid[n].mean())


def bwt(matrix: ScoreMatrix) -> float:
    """Backward transfer: change on old tasks after finishing the stream.

    Mean over tasks i < N of final-row F1 minus the diagonal F1; negative
    values mean forgetting.
    """
    n = matrix.n_tasks
    if n < 2:
        raise ValueError("bwt needs at least two tasks")
    _require(matrix, [(n, i) for i in range(1, n)] + [(i, i) for i in range(1, n)], "bwt")
    diffs = [matrix.get(n, i) - matrix.get(i, i) for i in range(1, n)]
    return float(np.mean(diffs))


def fwt(matrix: ScoreMatrix) -> float:
    """Forward transfer: zero-shot gain on each unseen task over the baseline row."""
    n = matrix.n_tasks
    if n < 2:
        raise ValueError("fwt needs at least two tasks")
    _require(matrix, [(i - 1, i) for i in range(2, n + 1)] + [(0, i) for i in range(2, n + 1)], "fwt")
    diffs = [matrix.get(i - 1, i) - matrix.get(0, i) for i in range(2, n + 1)]
    return float(np.mean(diffs))


def fs_f1(stage_records, k: int) -> float:
    """Mean few-shot F1 at shot count k across all task records."""
    records = list(stage_records)
    if not records:
        raise ValueError("no stage records")
    values = []
    for rec in records:
        if k not in rec.few_shot_f1:
            raise ValueError(f"task {rec.task_id} has no few-shot record for k={k}")
        values.append(rec.few_shot_f1[k])
    return float(np.mean(values))
