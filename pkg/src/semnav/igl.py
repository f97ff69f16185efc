"""Instruction encoder with guidance-phrase attention and a per-token gate."""
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numkernel import Module, MultiHeadAttention, Parameter, TransformerEncoder
from .numkernel import tensor as T
from .numkernel.nn import xavier_uniform
from .semparser import category_token, extract_phrases, parse, tokenize

ROLE_CONTEXT, ROLE_DIRECTION, ROLE_LANDMARK = 0, 1, 2

CLS, UNK = "[CLS]", "[UNK]"
# words the task templates use besides lexicon entries
TEMPLATE_WORDS = (",", ".", "and", "then", "walk", "head", "to", "the", "toward", "there", "once",
                  "outside", "at", "past", "into")


class Vocab:
    """Token <-> id map: specials, category tokens, then sorted words."""

    def __init__(self, words, categories):
        cats = [category_token(c) for c in categories]
        plain = sorted(set(words) - set(cats) - {CLS, UNK})
        self.itos = [CLS, UNK] + cats + plain
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def ids(self, tokens):
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    @classmethod
    def from_lexicon(cls, lexicon):
        words = set(TEMPLATE_WORDS)
        for phrase in list(lexicon.direction_patterns) + list(lexicon.landmark_dictionary):
            words.update(phrase.split())
        return cls(words, lexicon.category_names)


@dataclass
class InstructionIds:
    instruction: list  # starts with [CLS]
    directions: list
    landmarks: list


def prepare_instruction(text, lexicon, vocab):
    """Tokenize, extract guidance phrases and map everything to ids."""
    tokens = tokenize(text)
    dirs, lms = extract_phrases(parse(tokens, lexicon), lexicon)
    return InstructionIds(vocab.ids([CLS] + tokens), vocab.ids(dirs), vocab.ids(lms))


@dataclass
class InstructionEncoding:
    K_f: T.Tensor
    E_c: T.Tensor
    E_g: T.Tensor
    omega: T.Tensor


class InstructionEncoder(Module):
    """Embeds (instruction, directions, landmarks), encodes the instruction with
    a transformer and blends it with guidance-attended features through a
    sigmoid gate: ``K_f = w * E_g + (1 - w) * E_c``."""

    def __init__(self, vocab_size, d_model, heads, layers, max_len, rng):
        super().__init__()
        self.vocab_size, self.max_len = vocab_size, max_len
        self.token_embedding = Parameter(xavier_uniform(rng, (vocab_size, d_model)))
        self.position_embedding = Parameter(xavier_uniform(rng, (max_len, d_model)))
        self.role_embedding = Parameter(xavier_uniform(rng, (3, d_model)))
        self.null_token = Parameter(xavier_uniform(rng, (1, d_model)))
        self.context = TransformerEncoder(d_model, heads, layers, rng)
        self.guide = MultiHeadAttention(d_model, heads, rng)
        self.gate_g = Parameter(xavier_uniform(rng, (d_model, 1)))
        self.gate_c = Parameter(xavier_uniform(rng, (d_model, 1)))
        self.gate_b = Parameter(np.zeros(1))

    def embed(self, ids, role):
        """Token + position + role embedding; an empty list yields the null row."""
        if not len(ids):
            return self.null_token
        ids = np.asarray(ids, dtype=int)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ContractViolation(f"token id outside vocabulary of size {self.vocab_size}")
        if len(ids) > self.max_len:
            raise ContractViolation(f"sequence length {len(ids)} exceeds max_len {self.max_len}")
        pos = np.arange(len(ids))
        return self.token_embedding[ids] + self.position_embedding[pos] + self.role_embedding[role]

    def embed_tokens(self, instruction, directions, landmarks):
        return (self.embed(instruction, ROLE_CONTEXT), self.embed(directions, ROLE_DIRECTION),
                self.embed(landmarks, ROLE_LANDMARK))

    def encode_context(self, inst):
        return self.context(inst)

    def fuse(self, E_c, dirs, lms, gate_override=None):
        guidance = T.concat([dirs, lms], axis=0)
        E_g = self.guide(E_c, guidance, guidance)
        pre = E_g @ self.gate_g + E_c @ self.gate_c + self.gate_b
        if gate_override is not None:
            pre = T.Tensor(np.full(pre.shape, float(gate_override)))
        omega = T.sigmoid(pre)
        K_f = omega * E_g + (1.0 - omega) * E_c
        return InstructionEncoding(K_f, E_c, E_g, omega)

    def __call__(self, ids, use_guidance=True):
        inst, dirs, lms = self.embed_tokens(ids.instruction, ids.directions, ids.landmarks)
        E_c = self.encode_context(inst)
        if not use_guidance:
            return InstructionEncoding(E_c, E_c, None, None)
        return self.fuse(E_c, dirs, lms)
