"""Character vocabulary with the protocol's literal sentinels as single tokens.

"<sep>" and "<eos>" appear as literal strings on the wire and in training
files; the tokenizer maps each to one special id so the model can attend to
and emit them as units.
"""

from __future__ import annotations

from typing import List

PAD = "<pad>"
EOS = "<eos>"
SEP = "<sep>"
UNK = "<unk>"

# Printable ASCII plus a few common punctuation marks beyond it.
_BASE_CHARS = [chr(c) for c in range(32, 127)] + ["\n", "’", "“", "”", "–", "—"]


class CharVocab:
    def __init__(self):
        self.specials = [PAD, EOS, SEP, UNK]
        self.id_of = {}
        self.token_of = {}
        for token in self.specials + _BASE_CHARS:
            idx = len(self.id_of)
            self.id_of[token] = idx
            self.token_of[idx] = token
        self.pad_id = self.id_of[PAD]
        self.eos_id = self.id_of[EOS]
        self.sep_id = self.id_of[SEP]
        self.unk_id = self.id_of[UNK]

    def __len__(self) -> int:
        return len(self.id_of)

    def encode(self, text: str) -> List[int]:
        ids = []
        i = 0
        while i < len(text):
            if text.startswith(EOS, i):
                ids.append(self.eos_id)
                i += len(EOS)
            elif text.startswith(SEP, i):
                ids.append(self.sep_id)
                i += len(SEP)
            else:
                ids.append(self.id_of.get(text[i], self.unk_id))
                i += 1
        return ids

    def decode(self, ids) -> str:
        parts = []
        for idx in ids:
            token = self.token_of.get(int(idx), UNK)
            if token == PAD:
                continue
            parts.append(token)
        return "".join(parts)
