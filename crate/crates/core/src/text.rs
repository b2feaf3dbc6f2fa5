//! Category-token descriptions of the query object.
//!
//! The describer only looks at the query frame through the query mask: it
//! reads the mean color of the masked pixels and matches it against the
//! category palette. A noise channel then replaces the answer with a
//! uniformly drawn wrong token at rate `noise_rate`, modeling an unreliable
//! vision-language describer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{category_color, CorrespondenceSample, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Oracle,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextDescription {
    pub token_id: usize,
    pub confidence: f64,
    pub source: TextSource,
}

/// Nearest palette entry to the mean masked color, with a match score in `[0, 1]`.
pub fn read_masked_category(sample: &CorrespondenceSample) -> (usize, f64) {
    let frame = &sample.query_frame;
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (r, c) in sample.query_mask.pixels() {
        for (ch, s) in sum.iter_mut().enumerate() {
            *s += frame.get(r, c, ch) as f64;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let (best, dist) = (0..VOCAB_SIZE)
        .map(|k| {
            let p = category_color(k);
            let d: f64 = (0..3).map(|i| (mean[i] - p[i] as f64).powi(2)).sum();
            (k, d.sqrt())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty vocabulary");
    (best, (1.0 - dist / 3f64.sqrt()).clamp(0.0, 1.0))
}

fn stream_seed(sample_id: &str, seed: u64) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(sample_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Describe the query object. Deterministic in `(sample.id, noise_rate, seed)`.
pub fn describe(sample: &CorrespondenceSample, noise_rate: f64, seed: u64) -> TextDescription {
    let (read, confidence) = read_masked_category(sample);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&sample.id, seed));
    let u: f64 = rng.gen();
    if u < noise_rate {
        let mut wrong = rng.gen_range(0..VOCAB_SIZE - 1);
        if wrong >= read {
            wrong += 1;
        }
        TextDescription {
            token_id: wrong,
            confidence: 1.0 / VOCAB_SIZE as f64,
            source: TextSource::Noisy,
        }
    } else {
        TextDescription {
            token_id: read,
            confidence,
            source: TextSource::Oracle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, SceneSpec, Scenario};

    fn samples() -> Vec<CorrespondenceSample> {
        (0..20)
            .flat_map(|s| generate_scene(&SceneSpec::preset(Scenario::ALL[s % 6], s as u64)).unwrap())
            .collect()
    }

    #[test]
    fn masked_read_recovers_category() {
        for s in samples() {
            assert_eq!(read_masked_category(&s).0, s.category, "{}", s.id);
        }
    }

    #[test]
    fn noise_extremes() {
        for s in samples() {
            let d = describe(&s, 0.0, 4);
            assert_eq!(d.token_id, s.category);
            assert_eq!(d.source, TextSource::Oracle);
            let d = describe(&s, 1.0, 4);
            assert_ne!(d.token_id, s.category);
            assert_eq!(d.source, TextSource::Noisy);
            assert!(d.token_id < VOCAB_SIZE);
        }
    }

    #[test]
    fn deterministic() {
        let s = &samples()[0];
        assert_eq!(describe(s, 0.3, 9), describe(s, 0.3, 9));
    }

    #[test]
    fn noise_frequency_and_uniformity() {
        let s = samples().swap_remove(0);
        let n = 10_000;
        let mut counts = [0usize; VOCAB_SIZE];
        let mut wrong = 0;
        for seed in 0..n {
            let d = describe(&s, 0.2, seed as u64);
            if d.token_id != s.category {
                wrong += 1;
            }
            counts[d.token_id] += 1;
        }
        let freq = wrong as f64 / n as f64;
        assert!((freq - 0.2).abs() <= 0.01, "{freq}");

        // Chi-squared over the 31 wrong tokens under noise_rate = 1.
        let mut counts = [0usize; VOCAB_SIZE];
        for seed in 0..n {
            counts[describe(&s, 1.0, seed as u64).token_id] += 1;
        }
        assert_eq!(counts[s.category], 0);
        let expected = n as f64 / 31.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != s.category)
            .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Critical value of chi-squared with 30 degrees of freedom at p = 0.01.
        assert!(chi2 < 50.892, "chi2 = {chi2}");
    }
}
