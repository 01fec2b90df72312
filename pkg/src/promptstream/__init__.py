"""Continual soft-prompt tuning over a stream of domain tasks.

A frozen toy masked-LM backbone is steered by per-task soft prompts; trained
prompts are archived in a library for exact replay (no forgetting), reused to
initialize new tasks (forward transfer), and optionally produced by a small
hypernetwork that consolidates old tasks (backward transfer). The harness
runs the zero-/few-/full-shot protocol per task and reports Avg.F1 / FWT /
BWT / fs.F1 from the score matrix.
"""

__version__ = "0.1.0"

from .config import ModelConfig  # noqa: F401
from .model import Backbone, SoftPrompt, Verbalizer  # noqa: F401
