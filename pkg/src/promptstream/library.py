"""Per-task prompt archive: storage, similarity retrieval, and init strategies.

After each task's full-shot training the trained prompt, the task embedding,
and the measured test F1 are appended here. Entries are stored by value and
never mutated afterwards (the hypernetwork consolidation path swaps a whole
entry instead), which is what makes later replay of an old task reproduce
its recorded score exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .container import read_container, write_container
from .model import SoftPrompt


@dataclass
class LibraryEntry:
    task_id: int
    prompt: SoftPrompt
    embedding: np.ndarray
    recorded_f1: float


@dataclass
class PromptLibrary:
    """Insertion-ordered archive of (prompt, task embedding, test F1) per task."""

    config: ModelConfig
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def task_ids(self):
        return [e.task_id for e in self.entries]

    def get(self, task_id: int) -> LibraryEntry:
        for e in self.entries:
            if e.task_id == task_id:
                return e
        raise KeyError(f"task {task_id} not in library")

    def store(self, task_id: int, prompt: SoftPrompt, embedding, recorded_f1: float):
        """Append one finished task; rejects duplicates, copies all tensors."""
        if any(e.task_id == task_id for e in self.entries):
            raise ValueError(f"task {task_id} already stored")
        prompt.validate(self.config)
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (self.config.hidden_dim,):
            raise ValueError(
                f"embedding shape {embedding.shape} != ({self.config.hidden_dim},)"
            )
        if not 0.0 <= recorded_f1 <= 100.0:
            raise ValueError(f"recorded_f1 must be in [0, 100], got {recorded_f1}")
        self.entries.append(
            LibraryEntry(task_id, prompt.copy(), embedding.copy(), float(recorded_f1))
        )

    def replace(self, task_id: int, prompt: SoftPrompt, recorded_f1: float):
        """Swap one entry's prompt and score atomically (consolidation path)."""
        entry = self.get(task_id)
        entry.prompt = prompt.copy()
        entry.recorded_f1 = float(recorded_f1)


def similarity(z_a, z_b):
    """Similarity of two task embeddings.

    Returns (E, C, score): inverse-distance term E = 1 / (1 + ||a - b||),
    cosine C (0 when either vector is zero), and their mean.
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError(f"embedding dimensions differ: {z_a.shape} vs {z_b.shape}")
    e = 1.0 / (1.0 + np.linalg.norm(z_a - z_b))
    denom = np.linalg.norm(z_a) * np.linalg.norm(z_b)
    c = 0.0 if denom == 0.0 else float(z_a @ z_b / denom)
    return e, c, (e + c) / 2.0


def init_from_previous(library: PromptLibrary, rng: np.random.Generator) -> SoftPrompt:
    """Most recently stored prompt; random when the library is empty."""
    if not library.entries:
        return SoftPrompt.random(library.config, rng)
    return library.entries[-1].prompt.copy()


def init_from_most_similar(library: PromptLibrary, z_query, rng: np.random.Generator):
    """Prompt of the stored task most similar to the query embedding.

    Returns (prompt, source task_id); ties break toward the lowest task_id,
    and an empty library yields (random prompt, None).
    """
    if not library.entries:
        return SoftPrompt.random(library.config, rng), None
    best = None
    best_score = -np.inf
    for e in library.entries:
        _, _, score = similarity(z_query, e.embedding)
        if score > best_score:
            best, best_score = e, score
    return best.prompt.copy(), best.task_id


def init_from_mean(library: PromptLibrary, rng: np.random.Generator) -> SoftPrompt:
    """Elementwise mean of all stored prompts (per layer in deep mode)."""
    if not library.entries:
        return SoftPrompt.random(library.config, rng)
    modes = {e.prompt.injection for e in library.entries}
    if len(modes) > 1:
        raise ValueError(f"library mixes injection modes: {sorted(modes)}")
    mean = np.mean([e.prompt.values for e in library.entries], axis=0)
    return SoftPrompt(mean, library.entries[0].prompt.injection)


def save_library(library: PromptLibrary, path):
    tensors = {}
    meta_entries = []
    for i, e in enumerate(library.entries):
        tensors[f"entry.{i}.prompt"] = e.prompt.values
        tensors[f"entry.{i}.embedding"] = e.embedding
        meta_entries.append(
            {"task_id": e.task_id, "recorded_f1": e.recorded_f1, "injection": e.prompt.injection}
        )
    write_container(
        path,
        kind="library",
        config=library.config.to_dict(),
        tensors=tensors,
        meta={"entries": meta_entries},
    )


def load_library(path, config: ModelConfig) -> PromptLibrary:
    kind, config_dict, meta, tensors = read_container(path)
    if kind != "library":
        raise ValueError(f"{path}: expected a prompt library, found kind {kind!r}")
    if config_dict != config.to_dict():
        raise ValueError(f"{path}: library was written for a different model config")
    library = PromptLibrary(config)
    for i, rec in enumerate(meta["entries"]):
        prompt = SoftPrompt(tensors[f"entry.{i}.prompt"], rec["injection"])
        library.store(rec["task_id"], prompt, tensors[f"entry.{i}.embedding"], rec["recorded_f1"])
    return library
