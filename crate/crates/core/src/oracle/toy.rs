use super::{respond_from_distribution, ModelMeta, OracleError, Strategy, ValueOracle, ValueRequest, ValueResponse};

/// Spread of the per-token logit contributions.
const LOGIT_SCALE: f64 = 3.0;

/// A deterministic stand-in for a language model.
///
/// Each visible token at position `p` adds a pseudo-random amount, derived from
/// `(seed, p, token, candidate)`, to every candidate's logit; the distribution
/// is the softmax of those logits. Every visible token therefore moves every
/// probability, and nothing but the request determines the output.
#[derive(Debug, Clone)]
pub struct ToyHashLm {
    seed: u64,
    vocab_size: u32,
}

pub fn toy_hash_lm(seed: u64, vocab_size: u32) -> ToyHashLm {
    assert!(vocab_size >= 2, "toy model needs at least two vocabulary entries");
    ToyHashLm { seed, vocab_size }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5851_f42d_4c95_7f2d, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Uniform in [-1, 1).
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Stable word → id mapping used when no model tokenizer is available.
pub fn toy_token_id(word: &str, vocab_size: u32) -> u32 {
    // FNV-1a over the lowercased form
    let h = word
        .to_lowercase()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    (h % vocab_size as u64) as u32
}

impl ToyHashLm {
    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Token seen by the model at a masked position under random replacement.
    pub fn replacement(&self, request_seed: u64, position: usize) -> u32 {
        (mix(&[0x7265_706c, request_seed, position as u64]) % self.vocab_size as u64) as u32
    }

    pub fn distribution(&self, request: &ValueRequest) -> Vec<f64> {
        let visible: Vec<(usize, u32)> = request
            .tokens
            .iter()
            .zip(&request.keep)
            .enumerate()
            .filter_map(|(p, (&tok, &keep))| match (keep, request.strategy) {
                (true, _) => Some((p, tok)),
                (false, Strategy::ZeroAttention) => None,
                (false, Strategy::RandomReplace) => Some((p, self.replacement(request.seed, p))),
            })
            .collect();
        let logits: Vec<f64> = (0..self.vocab_size as u64)
            .map(|v| {
                let bias = unit(mix(&[self.seed, v]));
                let context: f64 = visible.iter().map(|&(p, tok)| unit(mix(&[self.seed, p as u64, tok as u64, v]))).sum();
                LOGIT_SCALE * (bias + context)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

impl ValueOracle for ToyHashLm {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        request.validate()?;
        respond_from_distribution(&self.distribution(request), request)
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta { model: format!("toy-hash-lm/seed={}", self.seed), vocab_size: self.vocab_size, max_tokens: 64 }
    }
}
