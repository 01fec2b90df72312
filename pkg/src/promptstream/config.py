"""Model-shape configuration, reserved vocabulary layout, and label encoding."""

from dataclasses import dataclass

# Reserved vocabulary ids. Every backbone vocabulary starts with these; content
# words occupy ids >= N_RESERVED.
PAD_ID = 0
MASK_ID = 1
SEP_ID = 2
URL_ID = 3
USER_ID = 4
UNK_ID = 5
RUMOR_WORD_ID = 6  # default verbalizer word for "rumor"
NONRUMOR_WORD_ID = 7  # default verbalizer word for "non-rumor"
N_RESERVED = 8

URL_TOKEN = "⟨URL⟩"  # ⟨URL⟩
USER_TOKEN = "⟨USER⟩"  # ⟨USER⟩

RESERVED_TOKENS = (
    "[PAD]",
    "[MASK]",
    "[SEP]",
    URL_TOKEN,
    USER_TOKEN,
    "[UNK]",
    "false",
    "true",
)

# Binary label encoding used everywhere: index 0 = non-rumor, index 1 = rumor.
NON_RUMOR = 0
RUMOR = 1
LABEL_NAMES = ("non-rumor", "rumor")

SHALLOW = "shallow"
DEEP = "deep"
INJECTION_MODES = (SHALLOW, DEEP)

HEAD_VERBALIZER = "verbalizer"
HEAD_CLS = "cls"
HEAD_MODES = (HEAD_VERBALIZER, HEAD_CLS)


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the backbone and of the soft prompts attached to it.

    ``injection`` picks where prompts live: ``shallow`` prepends prompt_len
    vectors to the input embeddings, ``deep`` attaches one prompt_len-long
    prefix to every layer's attention key/value stream. ``head`` picks the
    classification readout (masked-word verbalizer vs. linear head on the
    first position).
    """

    vocab_size: int = 512
    hidden_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    prompt_len: int = 8
    max_seq_len: int = 48
    injection: str = DEEP
    head: str = HEAD_VERBALIZER

    def __post_init__(self):
        if self.vocab_size <= N_RESERVED:
            raise ValueError(
                f"vocab_size must exceed the {N_RESERVED} reserved ids, got {self.vocab_size}"
            )
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim ({self.hidden_dim}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.prompt_len < 1:
            raise ValueError(f"prompt_len must be >= 1, got {self.prompt_len}")
        if self.max_seq_len < self.prompt_len + 3:
            raise ValueError(
                "max_seq_len must leave room for prompt + [MASK] + claim + [SEP]: "
                f"need >= {self.prompt_len + 3}, got {self.max_seq_len}"
            )
        if self.injection not in INJECTION_MODES:
            raise ValueError(f"injection must be one of {INJECTION_MODES}, got {self.injection!r}")
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return 4 * self.hidden_dim

    @property
    def body_budget(self) -> int:
        """Token budget for [MASK] + claim + [SEP] + comments.

        The prompt is charged against max_seq_len in both injection modes so
        that shallow and deep runs see identically truncated inputs.
        """
        return self.max_seq_len - self.prompt_len

    def prompt_shape(self) -> tuple:
        if self.injection == SHALLOW:
            return (self.prompt_len, self.hidden_dim)
        return (self.n_layers, self.prompt_len, self.hidden_dim)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "prompt_len": self.prompt_len,
            "max_seq_len": self.max_seq_len,
            "injection": self.injection,
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
