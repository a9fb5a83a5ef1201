//! Forward corruption, noise schedules and the re-mask operator.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::rng::Rng;
use crate::{Error, Result, Token, TokenSeq};

/// Monotone map `gamma: [0, 1] -> [0, 1]` from time to mask probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseSchedule {
    Linear,
    #[default]
    Cosine,
}

impl NoiseSchedule {
    /// `gamma(t)`, exact at both endpoints.
    pub fn gamma(self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        match self {
            NoiseSchedule::Linear => t,
            NoiseSchedule::Cosine => 1.0 - libm::cos(FRAC_PI_2 * t),
        }
    }

    /// `gamma^-1(r)` by bisection to 1e-9.
    pub fn inverse(self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r >= 1.0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if self.gamma(mid) < r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseSchedule::Linear => "linear",
            NoiseSchedule::Cosine => "cosine",
        }
    }
}

impl core::str::FromStr for NoiseSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(NoiseSchedule::Linear),
            "cosine" => Ok(NoiseSchedule::Cosine),
            other => Err(Error::arg("schedule", format!("unknown schedule {other:?}"))),
        }
    }
}

/// `ceil(r * len)` clamped to `1..=len`. A 1e-9 slack absorbs products such
/// as `0.3 * 10 = 3.0000000000000004`.
pub fn mask_count(r: f64, len: usize) -> usize {
    let c = libm::ceil(r * len as f64 - 1e-9);
    (c.max(1.0) as usize).min(len)
}

/// A token sequence together with the positions holding the mask symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskState {
    tokens: TokenSeq,
    mask_id: Token,
    mask_set: Vec<usize>,
}

impl MaskState {
    pub fn new(tokens: TokenSeq, mask_id: Token) -> Self {
        let mask_set = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == mask_id)
            .map(|(i, _)| i)
            .collect();
        Self {
            tokens,
            mask_id,
            mask_set,
        }
    }

    pub fn fully_masked(len: usize, mask_id: Token) -> Self {
        Self::new(alloc::vec![mask_id; len], mask_id)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn into_tokens(self) -> TokenSeq {
        self.tokens
    }

    pub fn mask_id(&self) -> Token {
        self.mask_id
    }

    /// Masked positions, ascending.
    pub fn mask_set(&self) -> &[usize] {
        &self.mask_set
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.mask_set.is_empty()
    }

    /// Fraction of masked positions.
    pub fn mask_ratio(&self) -> f64 {
        self.mask_set.len() as f64 / self.tokens.len() as f64
    }

    /// Writes `token` at masked `position`; revealed positions are never
    /// overwritten.
    pub fn reveal(&mut self, position: usize, token: Token) -> Result<()> {
        let at = self
            .mask_set
            .binary_search(&position)
            .map_err(|_| Error::arg("position", format!("{position} is not masked")))?;
        if token == self.mask_id {
            return Err(Error::arg("token", "cannot reveal the mask symbol"));
        }
        self.mask_set.remove(at);
        self.tokens[position] = token;
        Ok(())
    }
}

/// Fails with the first masked position, if any.
pub fn ensure_complete(z: &[Token], mask_id: Token) -> Result<()> {
    match z.iter().position(|&t| t == mask_id) {
        Some(position) => Err(Error::MaskedSequence { position }),
        None => Ok(()),
    }
}

/// Masks every position independently with probability `gamma(t)`.
pub fn corrupt(
    z: &[Token],
    t: f64,
    schedule: NoiseSchedule,
    mask_id: Token,
    rng: &mut Rng,
) -> Result<MaskState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg("t", format!("{t} is outside [0, 1]")));
    }
    ensure_complete(z, mask_id)?;
    let p = schedule.gamma(t);
    let tokens = z
        .iter()
        .map(|&tok| if rng.uniform() < p { mask_id } else { tok })
        .collect();
    Ok(MaskState::new(tokens, mask_id))
}

/// Masks exactly `ceil(r * L)` positions chosen uniformly without
/// replacement.
pub fn remask(z: &[Token], r: f64, mask_id: Token, rng: &mut Rng) -> Result<MaskState> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::arg("r", format!("mask ratio {r} is outside (0, 1)")));
    }
    ensure_complete(z, mask_id)?;
    let mut tokens = z.to_vec();
    for i in rng.choose(z.len(), mask_count(r, z.len())) {
        tokens[i] = mask_id;
    }
    Ok(MaskState::new(tokens, mask_id))
}

/// Nearly fully masked start: `ceil(r_init * L)` masked positions, the rest
/// filled with uniform random vocabulary tokens.
pub fn init_draft(r_init: f64, len: usize, vocab: usize, rng: &mut Rng) -> Result<MaskState> {
    if !(r_init > 0.0 && r_init <= 1.0) {
        return Err(Error::arg("r_init", format!("{r_init} is outside (0, 1]")));
    }
    if vocab == 0 || len == 0 {
        return Err(Error::arg("r_init", "empty vocabulary or sequence"));
    }
    let mask_id = vocab as Token;
    let masked = rng.choose(len, mask_count(r_init, len));
    let mut tokens: TokenSeq = (0..len).map(|_| rng.below(vocab) as Token).collect();
    for i in masked {
        tokens[i] = mask_id;
    }
    Ok(MaskState::new(tokens, mask_id))
}

/// The `keep` masked positions with the largest confidence score, ties
/// broken by lower position. Returned in ascending position order.
pub fn select_top_confidence(confidence: &[f64], mask_set: &[usize], keep: usize) -> Result<Vec<usize>> {
    if keep > mask_set.len() {
        return Err(Error::arg(
            "keep",
            format!("{keep} exceeds the {} masked positions", mask_set.len()),
        ));
    }
    let mut order = mask_set.to_vec();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

/// How masked positions are ranked when only some are revealed.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum ConfidenceRule {
    /// Probability of the sampled token.
    #[default]
    Plain,
    /// `ln p + tau * g` with `g` standard Gumbel; `tau` is the temperature
    /// at the current step (callers anneal it).
    Gumbel { temperature: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedules_hit_endpoints_exactly() {
        for s in [NoiseSchedule::Linear, NoiseSchedule::Cosine] {
            assert_eq!(s.gamma(0.0), 0.0);
            assert_eq!(s.gamma(1.0), 1.0);
        }
        let c = NoiseSchedule::Cosine.gamma(0.5);
        assert!((c - (1.0 - libm::cos(core::f64::consts::FRAC_PI_4))).abs() < 1e-15);
        assert!((c - 0.2929).abs() < 1e-4);
        assert_eq!(NoiseSchedule::Linear.gamma(0.5), 0.5);
    }

    #[test]
    fn inverse_recovers_time() {
        for s in [NoiseSchedule::Linear, NoiseSchedule::Cosine] {
            for k in 1..20 {
                let t = k as f64 / 20.0;
                assert!((s.inverse(s.gamma(t)) - t).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn corrupt_endpoints() {
        let z = vec![1, 2, 0, 1];
        let mut rng = Rng::seeded(0);
        let s = corrupt(&z, 0.0, NoiseSchedule::Cosine, 3, &mut rng).unwrap();
        assert!(s.is_complete());
        let s = corrupt(&z, 1.0, NoiseSchedule::Cosine, 3, &mut rng).unwrap();
        assert_eq!(s.mask_set(), &[0, 1, 2, 3]);
        assert!(corrupt(&z, 1.5, NoiseSchedule::Cosine, 3, &mut rng).is_err());
    }

    #[test]
    fn remask_counts() {
        let z = vec![0; 16];
        let mut rng = Rng::seeded(1);
        let s = remask(&z, 1.0 / 16.0 - 1e-12, 1, &mut rng).unwrap();
        assert_eq!(s.mask_set().len(), 1);
        for _ in 0..50 {
            assert_eq!(remask(&z, 0.5, 1, &mut rng).unwrap().mask_set().len(), 8);
        }
        assert!(remask(&z, 0.0, 1, &mut rng).is_err());
        assert!(remask(&z, 1.0, 1, &mut rng).is_err());
        assert_eq!(mask_count(0.3, 10), 3);
        assert_eq!(mask_count(0.3, 16), 5);
    }

    #[test]
    fn init_draft_counts() {
        let mut rng = Rng::seeded(2);
        let s = init_draft(1.0, 16, 16, &mut rng).unwrap();
        assert_eq!(s.mask_set().len(), 16);
        let s = init_draft(0.95, 16, 16, &mut rng).unwrap();
        assert_eq!(s.mask_set().len(), 16);
        let s = init_draft(0.75, 16, 16, &mut rng).unwrap();
        assert_eq!(s.mask_set().len(), 12);
        assert!(init_draft(0.0, 16, 16, &mut rng).is_err());
    }

    #[test]
    fn top_confidence_orders_and_breaks_ties() {
        let conf = [0.9, 0.5, 0.7];
        assert_eq!(select_top_confidence(&conf, &[0, 1, 2], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_confidence(&conf, &[0, 1, 2], 3).unwrap(), vec![0, 1, 2]);
        assert!(select_top_confidence(&conf, &[0, 1, 2], 0).unwrap().is_empty());
        assert!(select_top_confidence(&conf, &[0, 1], 3).is_err());
        let tied = [0.4, 0.4, 0.4];
        assert_eq!(select_top_confidence(&tied, &[0, 1, 2], 1).unwrap(), vec![0]);
    }

    #[test]
    fn reveal_rejects_unmasked_positions() {
        let mut s = MaskState::new(vec![0, 3, 1], 3);
        assert!(s.reveal(0, 2).is_err());
        s.reveal(1, 2).unwrap();
        assert!(s.is_complete());
        assert_eq!(s.tokens(), &[0, 2, 1]);
    }
}
