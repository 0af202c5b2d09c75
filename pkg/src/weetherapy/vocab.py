"""The fixed 32-token vocabulary shared by the decoder and the task bench."""

PAD, BOS, EOS, SEP = 0, 1, 2, 3
TASK_TOKENS = {"ER": 4, "CTC": 5, "CMD": 6, "DS": 7}
CLASS_TOKENS = (8, 9, 10, 11)
RISK, SAFE = 12, 13
SYMBOL_TOKENS = (14, 15, 16, 17)
GENERIC_TOKENS = tuple(range(18, 32))
VOCAB_SIZE = 32

# Tokens a copy-pretrained decoder learns to reproduce.
CONTENT_TOKENS = CLASS_TOKENS + (RISK, SAFE) + SYMBOL_TOKENS + GENERIC_TOKENS

NAMES = (
    ["PAD", "BOS", "EOS", "SEP", "T_ER", "T_CTC", "T_CMD", "T_DS"]
    + [f"C{i}" for i in range(4)]
    + ["RISK", "SAFE"]
    + [f"S{i}" for i in range(4)]
    + [f"G{i}" for i in range(14)]
)
assert len(NAMES) == VOCAB_SIZE


def name(token: int) -> str:
    return NAMES[token]


def token(name_: str) -> int:
    return NAMES.index(name_)


def render(ids) -> str:
    return " ".join(NAMES[int(i)] for i in ids)
