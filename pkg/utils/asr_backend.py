import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.config import ModelConfig
from utils.layers import (NEG_INF, add_attention, add_feed_forward, add_layer_norm, add_linear,
                          causal_mask, feed_forward, feed_forward_backward, layer_norm,
                          layer_norm_backward, linear, linear_backward, log_softmax,
                          log_softmax_backward, multi_head_attention, multi_head_attention_backward,
                          positional_encoding)
from utils.params import ParamStore

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ['<blank>', '<sos>', '<eos>', '<pad>']


class DecodingError(ValueError):
    """Raised for invalid token sequences, decoder inputs or scoring inputs"""
    pass


class AlignmentError(DecodingError):
    """Raised when a CTC target cannot be aligned to the encoder frames"""
    pass


class Vocabulary:
    """Dense token ids: the four specials first, then words in the given order."""

    def __init__(self, words: Sequence[str]):
        seen = set()
        for word in words:
            if word in SPECIAL_TOKENS:
                raise DecodingError(f"word {word!r} collides with a special token")
            if word in seen:
                raise DecodingError(f"duplicate word {word!r}")
            seen.add(word)
        self.tokens: List[str] = SPECIAL_TOKENS + list(words)
        self._index = {token: i for i, token in enumerate(self.tokens)}

    blank = 0
    sos = 1
    eos = 2
    pad = 3

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> List[str]:
        return self.tokens[len(SPECIAL_TOKENS):]

    def encode(self, words: Sequence[str], add_eos: bool = True) -> List[int]:
        try:
            ids = [self._index[w] for w in words]
        except KeyError as e:
            raise DecodingError(f"word not in vocabulary: {e.args[0]}")
        if any(i < len(SPECIAL_TOKENS) for i in ids):
            raise DecodingError(f"special token inside transcript: {words}")
        return ids + [self.eos] if add_eos else ids

    def decode(self, ids: Sequence[int]) -> List[str]:
        """Word strings for ids, stopping at eos and skipping the other specials."""
        words = []
        for i in ids:
            if i == self.eos:
                break
            if i >= len(SPECIAL_TOKENS):
                words.append(self.tokens[i])
        return words


@dataclass
class Hypothesis:
    tokens: List[int]
    score: float

    def to_dict(self) -> Dict:
        return {'tokens': list(self.tokens), 'score': self.score}


def check_target(target: Sequence[int], vocab_size: int):
    for t in target:
        if not 0 <= t < vocab_size:
            raise DecodingError(f"token id out of range: {t} (vocabulary size {vocab_size})")


# ---------------------------------------------------------------- parameters

def init_asr_params(cfg: ModelConfig, vocab_size: int, feature_dim: int, rng: np.random.Generator,
                    store: Optional[ParamStore] = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    d = cfg.d_model

    add_layer_norm(store, 'encoder.input_norm', feature_dim)
    add_linear(store, 'encoder.embed', feature_dim * cfg.subsampling, d, rng)
    for i in range(cfg.encoder_blocks):
        prefix = f"encoder.block{i}"
        add_layer_norm(store, f"{prefix}.norm1", d)
        add_attention(store, f"{prefix}.self_attn", d, rng)
        add_layer_norm(store, f"{prefix}.norm2", d)
        add_feed_forward(store, f"{prefix}.ff", d, cfg.d_ff, rng)
    add_layer_norm(store, 'encoder.final_norm', d)

    add_linear(store, 'ctc.out', d, vocab_size, rng)

    store.add('decoder.embed', 0.1 * rng.standard_normal((vocab_size, d)))
    for i in range(cfg.decoder_blocks):
        prefix = f"decoder.block{i}"
        add_layer_norm(store, f"{prefix}.norm1", d)
        add_attention(store, f"{prefix}.self_attn", d, rng)
        add_layer_norm(store, f"{prefix}.norm2", d)
        add_attention(store, f"{prefix}.cross_attn", d, rng)
        add_layer_norm(store, f"{prefix}.norm3", d)
        add_feed_forward(store, f"{prefix}.ff", d, cfg.d_ff, rng)
    add_layer_norm(store, 'decoder.final_norm', d)
    add_linear(store, 'decoder.out', d, vocab_size, rng)

    logger.info(f"[ASR] initialized backend: {cfg.encoder_blocks}+{cfg.decoder_blocks} blocks, "
                f"d_model={d}, vocabulary={vocab_size}")
    return store


# ---------------------------------------------------------------- encoder

def subsampled_length(n_frames: int, factor: int) -> int:
    return -(-n_frames // factor)


def encoder_forward(features: np.ndarray, params: ParamStore, cfg: ModelConfig) -> Tuple[np.ndarray, Dict]:
    """
    Input norm, sinusoidal positions, frame stacking by cfg.subsampling, then
    pre-norm self-attention blocks. Returns h [ceil(T/s), d_model] and a cache.
    """
    if features.ndim != 2 or features.shape[0] == 0:
        raise DecodingError(f"empty input: features shaped {features.shape}")
    T, D = features.shape
    s = cfg.subsampling
    if T < s:
        raise DecodingError(f"empty input after subsampling: {T} frames < factor {s}")

    normed, norm_cache = layer_norm(features, params, 'encoder.input_norm')
    x = normed + positional_encoding(T, D)
    U = subsampled_length(T, s)
    padded = np.zeros((U * s, D))
    padded[:T] = x
    stacked = padded.reshape(U, s * D)
    x = linear(stacked, params, 'encoder.embed')

    blocks = []
    for i in range(cfg.encoder_blocks):
        prefix = f"encoder.block{i}"
        n1, c1 = layer_norm(x, params, f"{prefix}.norm1")
        a, ca = multi_head_attention(n1, n1, params, f"{prefix}.self_attn", cfg.heads)
        x = x + a
        n2, c2 = layer_norm(x, params, f"{prefix}.norm2")
        f, cf = feed_forward(n2, params, f"{prefix}.ff")
        x = x + f
        blocks.append((c1, ca, c2, cf))
    h, final_cache = layer_norm(x, params, 'encoder.final_norm')
    return h, {'T': T, 'norm': norm_cache, 'stacked': stacked, 'blocks': blocks, 'final': final_cache}


def encoder_backward(gh: np.ndarray, cache: Dict, params: ParamStore, cfg: ModelConfig,
                     grads: Dict[str, np.ndarray]) -> np.ndarray:
    """Accumulates encoder gradients into grads; returns the gradient w.r.t. the features."""
    gx = layer_norm_backward(gh, cache['final'], params, 'encoder.final_norm', grads)
    for i in reversed(range(len(cache['blocks']))):
        prefix = f"encoder.block{i}"
        c1, ca, c2, cf = cache['blocks'][i]
        g_n2 = feed_forward_backward(gx, cf, params, f"{prefix}.ff", grads)
        gx = gx + layer_norm_backward(g_n2, c2, params, f"{prefix}.norm2", grads)
        g_q, g_kv = multi_head_attention_backward(gx, ca, params, f"{prefix}.self_attn", cfg.heads, grads)
        gx = gx + layer_norm_backward(g_q + g_kv, c1, params, f"{prefix}.norm1", grads)

    g_stacked = linear_backward(gx, cache['stacked'], params, 'encoder.embed', grads)
    T = cache['T']
    D = g_stacked.shape[1] // cfg.subsampling
    g_padded = g_stacked.reshape(-1, D)
    return layer_norm_backward(g_padded[:T], cache['norm'], params, 'encoder.input_norm', grads)


# ---------------------------------------------------------------- CTC

def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> Tuple[float, np.ndarray]:
    """
    Negative log of the summed probability of every blank-augmented alignment.

    Runs the forward-backward recursions in log space. Returns the loss and its
    gradient w.r.t. log_probs [U, V].
    """
    U, V = log_probs.shape
    target = list(target)
    check_target(target, V)
    if blank in target:
        raise DecodingError("CTC target contains the blank token")
    if U < ctc_min_frames(target):
        raise AlignmentError(
            f"no feasible alignment: {U} frames for a target of {len(target)} tokens "
            f"(needs {ctc_min_frames(target)})"
        )

    labels = np.full(2 * len(target) + 1, blank)
    labels[1::2] = target
    S = labels.size
    # s-2 transitions allowed into non-blank labels that differ from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (labels[2:] != blank) & (labels[2:] != labels[:-2])

    emit = log_probs[:, labels]  # [U, S]
    alpha = np.full((U, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for u in range(1, U):
        prev = alpha[u - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[u] = acc + emit[u]

    # beta excludes the emission at its own frame
    beta = np.full((U, S), NEG_INF)
    beta[U - 1, S - 1] = 0.0
    if S > 1:
        beta[U - 1, S - 2] = 0.0
    for u in range(U - 2, -1, -1):
        nxt = beta[u + 1] + emit[u + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[u] = acc

    log_likelihood = alpha[U - 1, S - 1] if S == 1 else np.logaddexp(alpha[U - 1, S - 1], alpha[U - 1, S - 2])
    if not np.isfinite(log_likelihood):
        raise AlignmentError("no feasible alignment: zero path probability")

    occupancy = np.exp(alpha + beta - log_likelihood)
    grad = np.zeros_like(log_probs)
    for s in range(S):
        grad[:, labels[s]] -= occupancy[:, s]
    return float(-log_likelihood), grad


def ctc_head(h: np.ndarray, params: ParamStore) -> np.ndarray:
    return log_softmax(linear(h, params, 'ctc.out'))


# ---------------------------------------------------------------- decoder

def decoder_forward(h: np.ndarray, tokens: Sequence[int], params: ParamStore, cfg: ModelConfig) -> Tuple[np.ndarray, Dict]:
    """
    Teacher-forced decoder over input tokens (sos first). Returns per-step
    log-probabilities [L, V] and a cache.
    """
    E = params['decoder.embed']
    check_target(tokens, E.shape[0])
    tokens = np.asarray(tokens, dtype=int)
    L = tokens.size
    d = E.shape[1]
    x = E[tokens] + positional_encoding(L, d)
    mask = causal_mask(L)

    blocks = []
    for i in range(cfg.decoder_blocks):
        prefix = f"decoder.block{i}"
        n1, c1 = layer_norm(x, params, f"{prefix}.norm1")
        a, ca = multi_head_attention(n1, n1, params, f"{prefix}.self_attn", cfg.heads, mask)
        x = x + a
        n2, c2 = layer_norm(x, params, f"{prefix}.norm2")
        b, cb = multi_head_attention(n2, h, params, f"{prefix}.cross_attn", cfg.heads)
        x = x + b
        n3, c3 = layer_norm(x, params, f"{prefix}.norm3")
        f, cf = feed_forward(n3, params, f"{prefix}.ff")
        x = x + f
        blocks.append((c1, ca, c2, cb, c3, cf))
    y, final_cache = layer_norm(x, params, 'decoder.final_norm')
    logp = log_softmax(linear(y, params, 'decoder.out'))
    return logp, {'tokens': tokens, 'blocks': blocks, 'final': final_cache, 'y': y, 'logp': logp}


def decoder_backward(g_logp: np.ndarray, cache: Dict, params: ParamStore, cfg: ModelConfig,
                     grads: Dict[str, np.ndarray]) -> np.ndarray:
    """Accumulates decoder gradients into grads; returns the gradient w.r.t. h."""
    g_logits = log_softmax_backward(g_logp, cache['logp'])
    gy = linear_backward(g_logits, cache['y'], params, 'decoder.out', grads)
    gx = layer_norm_backward(gy, cache['final'], params, 'decoder.final_norm', grads)

    gh = 0.0
    for i in reversed(range(len(cache['blocks']))):
        prefix = f"decoder.block{i}"
        c1, ca, c2, cb, c3, cf = cache['blocks'][i]
        g_n3 = feed_forward_backward(gx, cf, params, f"{prefix}.ff", grads)
        gx = gx + layer_norm_backward(g_n3, c3, params, f"{prefix}.norm3", grads)
        g_q, g_kv = multi_head_attention_backward(gx, cb, params, f"{prefix}.cross_attn", cfg.heads, grads)
        gh = gh + g_kv
        gx = gx + layer_norm_backward(g_q, c2, params, f"{prefix}.norm2", grads)
        g_q, g_kv = multi_head_attention_backward(gx, ca, params, f"{prefix}.self_attn", cfg.heads, grads)
        gx = gx + layer_norm_backward(g_q + g_kv, c1, params, f"{prefix}.norm1", grads)

    g_embed = np.zeros_like(params['decoder.embed'])
    np.add.at(g_embed, cache['tokens'], gx)
    grads['decoder.embed'] = grads.get('decoder.embed', 0.0) + g_embed
    return gh


def attention_decoder_loss(h: np.ndarray, target: Sequence[int], params: ParamStore, cfg: ModelConfig,
                           sos: int = Vocabulary.sos, eos: int = Vocabulary.eos) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    """
    Teacher-forced cross entropy -sum_u log P(y_u | h, y_<u); target must end with eos.

    Returns (loss, decoder gradients, gradient w.r.t. h).
    """
    target = list(target)
    if not target or target[-1] != eos:
        raise DecodingError("attention target must end with eos")
    check_target(target, params['decoder.embed'].shape[0])
    logp, cache = decoder_forward(h, [sos] + target[:-1], params, cfg)
    steps = np.arange(len(target))
    loss = -float(np.sum(logp[steps, target]))

    g_logp = np.zeros_like(logp)
    g_logp[steps, target] = -1.0
    grads: Dict[str, np.ndarray] = {}
    gh = decoder_backward(g_logp, cache, params, cfg, grads)
    return loss, grads, gh


def joint_loss(theta_ctc: float, theta_attention: float, ctc_weight: float) -> float:
    if not 0.0 <= ctc_weight <= 1.0:
        raise ValueError(f"ctc weight must be in [0, 1], got {ctc_weight}")
    return ctc_weight * theta_ctc + (1.0 - ctc_weight) * theta_attention


def asr_loss(features: np.ndarray, target: Sequence[int], params: ParamStore, cfg: ModelConfig,
             ctc_weight: Optional[float] = None) -> Tuple[Dict[str, float], Dict[str, np.ndarray], np.ndarray]:
    """
    Joint CTC/attention loss of one utterance.

    target holds word ids followed by eos. Returns ({theta, theta_ctc,
    theta_att}, backend gradients, gradient w.r.t. the features).
    """
    lam = cfg.ctc_weight if ctc_weight is None else ctc_weight
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"ctc weight must be in [0, 1], got {lam}")
    h, enc_cache = encoder_forward(features, params, cfg)

    logp_ctc = ctc_head(h, params)
    theta_ctc, g_ctc_logp = ctc_loss(logp_ctc, [t for t in target if t != Vocabulary.eos])
    theta_att, grads, gh = attention_decoder_loss(h, target, params, cfg)

    grads = {name: (1.0 - lam) * g for name, g in grads.items()}
    gh = (1.0 - lam) * gh
    g_ctc_logits = log_softmax_backward(lam * g_ctc_logp, logp_ctc)
    gh = gh + linear_backward(g_ctc_logits, h, params, 'ctc.out', grads)
    g_features = encoder_backward(gh, enc_cache, params, cfg, grads)

    losses = {'theta': joint_loss(theta_ctc, theta_att, lam), 'theta_ctc': theta_ctc, 'theta_att': theta_att}
    return losses, grads, g_features


# ---------------------------------------------------------------- decoding

def next_token_logprobs(h: np.ndarray, prefix: Sequence[int], params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    logp, _ = decoder_forward(h, prefix, params, cfg)
    return logp[-1]


def _candidate_tokens(vocab_size: int, force_eos: bool) -> np.ndarray:
    if force_eos:
        return np.array([Vocabulary.eos])
    return np.array([t for t in range(vocab_size) if t not in (Vocabulary.blank, Vocabulary.sos, Vocabulary.pad)])


def greedy_decode(h: np.ndarray, params: ParamStore, cfg: ModelConfig, max_len: Optional[int] = None) -> Hypothesis:
    """Argmax at every step (lowest id on ties) until eos; max_len counts the eos."""
    max_len = max_len or cfg.max_decode_len
    vocab_size = params['decoder.embed'].shape[0]
    prefix = [Vocabulary.sos]
    total = 0.0
    for step in range(max_len):
        logp = next_token_logprobs(h, prefix, params, cfg)
        candidates = _candidate_tokens(vocab_size, step == max_len - 1)
        best = int(candidates[np.argmax(logp[candidates])])
        total += float(logp[best])
        prefix.append(best)
        if best == Vocabulary.eos:
            break
    tokens = prefix[1:]
    return Hypothesis(tokens=tokens, score=total / len(tokens))


def beam_search_decode(h: np.ndarray, params: ParamStore, cfg: ModelConfig, beam_width: int,
                       max_len: Optional[int] = None) -> Hypothesis:
    """
    Beam search over decoder steps.

    Live beams are ranked by summed log-probability; a hypothesis that emits
    eos is scored by its log-probability divided by its length (eos
    included). The last allowed step only offers eos. Ties break toward the
    lexicographically smaller token sequence.
    """
    if beam_width < 1:
        raise DecodingError(f"beam width must be >= 1, got {beam_width}")
    max_len = max_len or cfg.max_decode_len
    vocab_size = params['decoder.embed'].shape[0]

    live: List[Tuple[List[int], float]] = [([Vocabulary.sos], 0.0)]
    finished: List[Hypothesis] = []
    for step in range(max_len):
        candidates = []
        for prefix, score in live:
            logp = next_token_logprobs(h, prefix, params, cfg)
            for token in _candidate_tokens(vocab_size, step == max_len - 1):
                candidates.append((prefix + [int(token)], score + float(logp[token])))
        candidates.sort(key=lambda c: (-c[1], c[0]))

        live = []
        for prefix, score in candidates[:beam_width]:
            if prefix[-1] == Vocabulary.eos:
                tokens = prefix[1:]
                finished.append(Hypothesis(tokens=tokens, score=score / len(tokens)))
            else:
                live.append((prefix, score))
        if not live:
            break

    finished.sort(key=lambda hyp: (-hyp.score, hyp.tokens))
    return finished[0]


def sequence_score(h: np.ndarray, tokens: Sequence[int], params: ParamStore, cfg: ModelConfig) -> float:
    """Length-normalized model log-probability of a complete token sequence (ending in eos)."""
    logp, _ = decoder_forward(h, [Vocabulary.sos] + list(tokens[:-1]), params, cfg)
    return float(np.sum(logp[np.arange(len(tokens)), list(tokens)])) / len(tokens)


# ---------------------------------------------------------------- scoring

def levenshtein_alignment(ref: Sequence[str], hyp: Sequence[str]) -> List[Dict]:
    """Minimum-edit alignment of hyp against ref, as a list of ok/sub/ins/del operations."""
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=int)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j] + 1, dp[i, j - 1] + 1, dp[i - 1, j - 1] + cost)

    i, j = n, m
    alignment = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            op = 'ok' if ref[i - 1] == hyp[j - 1] else 'sub'
            alignment.append({'op': op, 'ref': ref[i - 1], 'hyp': hyp[j - 1]})
            i -= 1
            j -= 1
        elif j > 0 and dp[i, j] == dp[i, j - 1] + 1:
            alignment.append({'op': 'ins', 'ref': None, 'hyp': hyp[j - 1]})
            j -= 1
        else:
            alignment.append({'op': 'del', 'ref': ref[i - 1], 'hyp': None})
            i -= 1
    alignment.reverse()
    return alignment


def word_error_rate(hyp: Sequence[str], ref: Sequence[str]) -> Dict:
    """Returns substitutions, insertions, deletions and wer = (S + I + D) / len(ref)."""
    if len(ref) == 0:
        raise DecodingError("empty reference")
    alignment = levenshtein_alignment(list(ref), list(hyp))
    counts = {op: sum(1 for a in alignment if a['op'] == op) for op in ('sub', 'ins', 'del')}
    return {
        'substitutions': counts['sub'],
        'insertions': counts['ins'],
        'deletions': counts['del'],
        'wer': (counts['sub'] + counts['ins'] + counts['del']) / len(ref),
        'alignment': alignment,
    }


def corpus_wer(pairs: Sequence[Tuple[Sequence[str], Sequence[str]]]) -> float:
    """Total edits over total reference words for (hyp, ref) pairs."""
    edits = 0
    words = 0
    for hyp, ref in pairs:
        report = word_error_rate(hyp, ref)
        edits += report['substitutions'] + report['insertions'] + report['deletions']
        words += len(ref)
    if words == 0:
        raise DecodingError("empty reference")
    return edits / words


def write_hypotheses(path: str, hypotheses: Dict[str, str]):
    """One 'utt_id<TAB>hypothesis' line per utterance, sorted by id."""
    with open(path, 'w', encoding='utf-8') as f:
        for utt_id in sorted(hypotheses):
            f.write(f"{utt_id}\t{hypotheses[utt_id]}\n")


def read_hypotheses(path: str) -> Dict[str, str]:
    hypotheses = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.rstrip('\n')
            if not line:
                continue
            utt_id, _, text = line.partition('\t')
            hypotheses[utt_id] = text
    return hypotheses
