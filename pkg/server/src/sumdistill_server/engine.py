"""Model registry: tiny causal LMs for generation/scoring, a neural NLI head,
and embedding-based similarity, all deterministic given their seeds.

Models are character-level; the wire protocol's character budget maps onto
token budgets directly. Scoring returns true conditional log-probabilities
(a pad token anchors position zero so the first token has a distribution).
"""

from __future__ import annotations

import copy
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from transformers import GPT2Config, GPT2LMHeadModel

from .vocab import CharVocab

NLI_LABELS = ("Entailment", "Neutral", "Contradiction")


class ServerError(Exception):
    code = "bad_request"
    status = 400


class BadRequest(ServerError):
    code = "bad_request"
    status = 400


class ModelNotFound(ServerError):
    code = "model_not_found"
    status = 404


class Overloaded(ServerError):
    code = "overloaded"
    status = 503


@dataclass
class EngineConfig:
    seed: int = 1234
    n_embd: int = 64
    n_layer: int = 2
    n_head: int = 4
    n_positions: int = 1024
    nli_dim: int = 32
    learning_rate: float = 1e-3
    generator_id: str = "gen-small"
    scorer_id: str = "score-small"
    nli_id: str = "nli-small"
    similarity_id: str = "sim-small"


class CausalCharLM:
    """GPT-2 architecture over the character vocabulary; generates and scores."""

    kind = "generator"

    def __init__(self, model_id: str, vocab: CharVocab, config: EngineConfig, seed: int):
        self.model_id = model_id
        self.vocab = vocab
        self.config = config
        torch.manual_seed(seed)
        gpt_config = GPT2Config(
            vocab_size=len(vocab),
            n_positions=config.n_positions,
            n_embd=config.n_embd,
            n_layer=config.n_layer,
            n_head=config.n_head,
            bos_token_id=None,
            eos_token_id=vocab.eos_id,
            pad_token_id=vocab.pad_id,
        )
        self.model = GPT2LMHeadModel(gpt_config).eval()

    def _clip_prompt(self, ids: List[int], max_new_tokens: int) -> List[int]:
        budget = self.config.n_positions - max_new_tokens - 1
        return ids[-budget:] if len(ids) > budget else ids

    def generate(
        self,
        prompt: str,
        strategy: str,
        beam_width: int,
        num_return: int,
        max_new_chars: int,
        seed: int,
    ) -> List[Tuple[str, float]]:
        prompt_ids = self.vocab.encode(prompt)
        if not prompt_ids:
            raise BadRequest("prompt must be non-empty")
        # One character per token; headroom for the end sentinel, capped by the
        # context window.
        max_new_tokens = min(max_new_chars + 1, self.config.n_positions // 2)
        prompt_ids = self._clip_prompt(prompt_ids, max_new_tokens)
        input_ids = torch.tensor([prompt_ids], dtype=torch.long)
        attention = torch.ones_like(input_ids)
        torch.manual_seed(seed)
        with torch.no_grad():
            output = self.model.generate(
                input_ids,
                attention_mask=attention,
                max_new_tokens=max_new_tokens,
                num_beams=beam_width,
                num_return_sequences=num_return,
                do_sample=(strategy == "sample"),
                pad_token_id=self.vocab.pad_id,
                eos_token_id=self.vocab.eos_id,
            )
        candidates: List[Tuple[str, float]] = []
        for row in output:
            generated = row[len(prompt_ids):].tolist()
            kept: List[int] = []
            for token in generated:
                if token in (self.vocab.eos_id, self.vocab.pad_id):
                    break
                kept.append(token)
            text = self.vocab.decode(kept)
            # The character budget is enforced on the decoded text, before any
            # end-sentinel handling.
            if len(text) > max_new_chars:
                text = text[:max_new_chars]
                kept = self.vocab.encode(text)
            logprob = self._continuation_logprob(prompt_ids, kept)
            candidates.append((text, logprob))
        candidates.sort(key=lambda item: -item[1])
        return candidates

    def _continuation_logprob(self, context_ids: List[int], continuation_ids: List[int]) -> float:
        if not continuation_ids:
            return float("-inf")
        return sum(self._token_logprobs(context_ids, continuation_ids))

    def _token_logprobs(self, context_ids: List[int], continuation_ids: List[int]) -> List[float]:
        full = [self.vocab.pad_id] + list(context_ids) + list(continuation_ids)
        input_ids = torch.tensor([full], dtype=torch.long)
        # The leading pad is a real position (the start anchor), so the mask
        # covers everything.
        attention = torch.ones_like(input_ids)
        with torch.no_grad():
            logits = self.model(input_ids, attention_mask=attention).logits[0]
        log_probs = F.log_softmax(logits.double(), dim=-1)
        offset = 1 + len(context_ids)
        out = []
        for position in range(offset, len(full)):
            token = full[position]
            out.append(float(log_probs[position - 1, token]))
        return out

    def score(self, context: str, continuation: str) -> List[float]:
        continuation_ids = self.vocab.encode(continuation)
        if not continuation_ids:
            raise BadRequest("continuation must be non-empty")
        context_ids = self.vocab.encode(context) if context else []
        total = len(context_ids) + len(continuation_ids) + 1
        if total > self.config.n_positions:
            raise BadRequest(
                f"context plus continuation spans {total} tokens, over the "
                f"{self.config.n_positions}-token window"
            )
        return self._token_logprobs(context_ids, continuation_ids)

    def finetuned(self, new_id: str, lines: List[List[int]], epochs: int, seed: int,
                  lr: float) -> "CausalCharLM":
        clone = copy.deepcopy(self)
        clone.model_id = new_id
        torch.manual_seed(seed)
        clone.model.train()
        optimizer = torch.optim.AdamW(clone.model.parameters(), lr=lr)
        for _ in range(epochs):
            for ids in lines:
                ids = ids[: self.config.n_positions - 1]
                input_ids = torch.tensor([[self.vocab.pad_id] + ids], dtype=torch.long)
                labels = input_ids.clone()
                labels[0, 0] = -100
                loss = clone.model(
                    input_ids=input_ids,
                    attention_mask=torch.ones_like(input_ids),
                    labels=labels,
                ).loss
                loss.backward()
                optimizer.step()
                optimizer.zero_grad()
        clone.model.eval()
        return clone


class NliNet:
    """Three-way classifier over pooled character embeddings."""

    kind = "nli"

    def __init__(self, model_id: str, vocab: CharVocab, dim: int, seed: int):
        self.model_id = model_id
        self.vocab = vocab
        torch.manual_seed(seed)
        self.embed = torch.nn.Embedding(len(vocab), dim)
        self.head = torch.nn.Linear(4 * dim, 3)
        for module in (self.embed, self.head):
            module.eval()

    def _pool(self, text: str) -> torch.Tensor:
        ids = torch.tensor(self.vocab.encode(text), dtype=torch.long)
        with torch.no_grad():
            return self.embed(ids).mean(dim=0)

    def classify(self, premise: str, hypothesis: str) -> Tuple[str, Dict[str, float]]:
        e_p = self._pool(premise)
        e_h = self._pool(hypothesis)
        features = torch.cat([e_p, e_h, (e_p - e_h).abs(), e_p * e_h])
        with torch.no_grad():
            probs = F.softmax(self.head(features).double(), dim=-1)
        values = [float(p) for p in probs]
        label = NLI_LABELS[max(range(3), key=lambda i: values[i])]
        return label, {
            "entailment": values[0],
            "neutral": values[1],
            "contradiction": values[2],
        }


class SimilarityNet:
    """Greedy max-cosine matching over character embeddings, clamped to [0, 1]."""

    kind = "similarity"

    def __init__(self, model_id: str, vocab: CharVocab, dim: int, seed: int):
        self.model_id = model_id
        self.vocab = vocab
        torch.manual_seed(seed)
        self.embed = torch.nn.Embedding(len(vocab), dim)
        self.embed.eval()

    def _vectors(self, text: str) -> torch.Tensor:
        ids = torch.tensor(self.vocab.encode(text), dtype=torch.long)
        with torch.no_grad():
            vectors = self.embed(ids).double()
        return F.normalize(vectors, dim=-1)

    def score(self, candidate: str, reference: str) -> Tuple[float, float, float]:
        cand = self._vectors(candidate)
        ref = self._vectors(reference)
        sims = cand @ ref.T
        precision = float(sims.max(dim=1).values.mean())
        recall = float(sims.max(dim=0).values.mean())
        precision = min(1.0, max(0.0, precision))
        recall = min(1.0, max(0.0, recall))
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1


def parse_training_lines(vocab: CharVocab, content: str) -> List[List[int]]:
    """Validate the fine-tuning record format and encode each line.

    Every non-empty line must carry the "TL;DR:" separator and end with the
    end sentinel; violations name the line.
    """
    lines = []
    for lineno, line in enumerate(content.splitlines(), start=1):
        if not line.strip():
            continue
        if " TL;DR: " not in line:
            raise BadRequest(f"training file line {lineno}: record has no 'TL;DR:' separator")
        if not line.endswith(" <eos>"):
            raise BadRequest(f"training file line {lineno}: record does not end with '<eos>'")
        lines.append(vocab.encode(line))
    if not lines:
        raise BadRequest("training file holds no records")
    return lines


class Engine:
    """Thread-safe registry of served models."""

    def __init__(self, config: Optional[EngineConfig] = None):
        self.config = config or EngineConfig()
        self.vocab = CharVocab()
        seed = self.config.seed
        generator = CausalCharLM(self.config.generator_id, self.vocab, self.config, seed)
        scorer = CausalCharLM(self.config.scorer_id, self.vocab, self.config, seed + 1)
        self._models: Dict[str, object] = {
            generator.model_id: generator,
            scorer.model_id: scorer,
            self.config.nli_id: NliNet(self.config.nli_id, self.vocab, self.config.nli_dim, seed + 2),
            self.config.similarity_id: SimilarityNet(
                self.config.similarity_id, self.vocab, self.config.nli_dim, seed + 3
            ),
        }
        self._registry_lock = threading.Lock()
        self._train_locks: Dict[str, threading.Lock] = {}
        self._sample_lock = threading.Lock()

    def model_ids(self) -> List[str]:
        with self._registry_lock:
            return sorted(self._models)

    def _get(self, model_id: str, kinds: Tuple[str, ...]):
        with self._registry_lock:
            model = self._models.get(model_id)
        if model is None:
            raise ModelNotFound(f"no model {model_id!r}")
        if model.kind not in kinds:
            raise ModelNotFound(f"model {model_id!r} is a {model.kind}, not one of {kinds}")
        return model

    def generate(self, model_id: str, prompt: str, strategy: str, beam_width: int,
                 num_return: int, max_new_chars: int, seed: int) -> List[Tuple[str, float]]:
        if strategy not in ("beam", "sample"):
            raise BadRequest(f"unknown strategy {strategy!r}")
        if not prompt:
            raise BadRequest("prompt must be non-empty")
        if not beam_width >= num_return >= 1:
            raise BadRequest("need beam_width >= num_return >= 1")
        if max_new_chars < 1:
            raise BadRequest("max_new_chars must be positive")
        model = self._get(model_id, ("generator",))
        if strategy == "sample":
            # Sampling draws from the process-global RNG; serialize for
            # seeded determinism.
            with self._sample_lock:
                return model.generate(prompt, strategy, beam_width, num_return, max_new_chars, seed)
        return model.generate(prompt, strategy, beam_width, num_return, max_new_chars, seed)

    def score(self, model_id: str, context: str, continuation: str) -> List[float]:
        if not continuation:
            raise BadRequest("continuation must be non-empty")
        model = self._get(model_id, ("generator",))
        return model.score(context, continuation)

    def nli(self, model_id: str, premise: str, hypothesis: str):
        if not premise or not hypothesis:
            raise BadRequest("premise and hypothesis must be non-empty")
        return self._get(model_id, ("nli",)).classify(premise, hypothesis)

    def similarity(self, model_id: str, candidate: str, reference: str):
        if not candidate or not reference:
            raise BadRequest("candidate and reference must be non-empty")
        return self._get(model_id, ("similarity",)).score(candidate, reference)

    def finetune(self, base_model_id: str, content: str, epochs: int) -> str:
        if epochs < 0:
            raise BadRequest("epochs must be >= 0")
        base = self._get(base_model_id, ("generator",))
        if epochs == 0:
            return base_model_id
        lines = parse_training_lines(self.vocab, content)
        digest = hashlib.sha256(f"{content}\x1f{epochs}".encode("utf-8")).hexdigest()[:8]
        new_id = f"{base_model_id}-ft-{digest}"
        with self._registry_lock:
            if new_id in self._models:
                return new_id
            lock = self._train_locks.setdefault(base_model_id, threading.Lock())
        # One fine-tune at a time per base model.
        with lock:
            with self._registry_lock:
                if new_id in self._models:
                    return new_id
            seed = int(digest, 16) % (2**31)
            tuned = base.finetuned(new_id, lines, epochs, seed, self.config.learning_rate)
            with self._registry_lock:
                self._models[new_id] = tuned
        return new_id
