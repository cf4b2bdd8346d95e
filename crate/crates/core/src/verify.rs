//! Box-free watermark extraction and user tracing. The owner decodes a
//! suspect image with the private decoder, then compares the recovered bits
//! against every registered fingerprint.

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::issuance::Registry;
use crate::latent::LatentVector;
use crate::nets::WatermarkDecoder;
use crate::tensor::Image;
use std::fmt;

/// Outcome of tracing one extracted fingerprint against a registry.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub extracted: Fingerprint,
    /// `(user_id, bit accuracy)` for every registered user, registry order.
    pub per_candidate: Vec<(String, f64)>,
    /// Best-scoring user (earliest registered wins ties). Present whenever
    /// the registry is nonempty, whatever the decision.
    pub traced_user: Option<String>,
    pub threshold: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Match,
    NoMatch,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Match => write!(f, "match"),
            Decision::NoMatch => write!(f, "no_match"),
        }
    }
}

impl VerificationReport {
    /// One record as stable line-oriented text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("extracted\t{}\n", self.extracted.to_hex()));
        out.push_str(&format!("threshold\t{}\n", self.threshold));
        out.push_str(&format!("decision\t{}\n", self.decision));
        out.push_str(&format!(
            "traced\t{}\n",
            self.traced_user.as_deref().unwrap_or("-")
        ));
        for (user, acc) in &self.per_candidate {
            out.push_str(&format!("acc\t{user}\t{acc}\n"));
        }
        out
    }
}

/// Decode one image: the first `d_w` outputs are bit logits (bit 1 iff
/// sigmoid exceeds 1/2, i.e. logit strictly positive), the rest estimate z.
pub fn extract_watermark(
    decoder: &WatermarkDecoder,
    image: &Image,
) -> Result<(Fingerprint, LatentVector)> {
    let out = decoder.forward_one(image)?;
    let d_w = decoder.d_w();
    let bits = Fingerprint::from_logits(&out.as_slice().expect("contiguous")[..d_w])?;
    let z_hat = LatentVector::from_values(out.iter().skip(d_w).copied().collect())?;
    Ok((bits, z_hat))
}

/// Fraction of positions where the two fingerprints agree.
pub fn bit_accuracy(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    Ok(a.matching_bits(b)? as f64 / a.len() as f64)
}

/// Score `extracted` against every registered fingerprint and pick the best
/// candidate. Ties go to the earliest-registered user.
pub fn trace_user(
    registry: &Registry,
    extracted: &Fingerprint,
    threshold: f64,
) -> Result<VerificationReport> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in (0.5, 1], got {threshold}"
        )));
    }
    let records = registry.records()?;
    if records.is_empty() {
        return Err(Error::InvalidState(
            "cannot trace against an empty registry".into(),
        ));
    }
    let mut per_candidate = Vec::with_capacity(records.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, record) in records.iter().enumerate() {
        let acc = bit_accuracy(extracted, &record.fingerprint)?;
        per_candidate.push((record.user_id.clone(), acc));
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((i, acc));
        }
    }
    let (best_idx, best_acc) = best.expect("registry is nonempty");
    let decision = if best_acc >= threshold {
        Decision::Match
    } else {
        Decision::NoMatch
    };
    Ok(VerificationReport {
        extracted: extracted.clone(),
        per_candidate,
        traced_user: Some(records[best_idx].user_id.clone()),
        threshold,
        decision,
    })
}

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::sample_fingerprint;
    use crate::issuance::register_user;
    use crate::rng::derive_rng;

    fn fp(bits: &[u8]) -> Fingerprint {
        Fingerprint::from_bits(bits.to_vec()).unwrap()
    }

    #[test]
    fn bit_accuracy_oracle_cases() {
        let mut rng = derive_rng(1, "verify.test");
        let a = sample_fingerprint(&mut rng, 32).unwrap();
        assert_eq!(bit_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&a, &a.complement()).unwrap(), 0.0);

        // Flip exactly 8 of 32 positions.
        let mut bits = a.bits().to_vec();
        for b in bits.iter_mut().take(8) {
            *b ^= 1;
        }
        let c = fp(&bits);
        assert_eq!(bit_accuracy(&a, &c).unwrap(), 0.75);

        let short = fp(&[1, 0]);
        assert!(matches!(bit_accuracy(&a, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn bit_accuracy_symmetry_and_complement() {
        let mut rng = derive_rng(2, "verify.test");
        for _ in 0..50 {
            let a = sample_fingerprint(&mut rng, 17).unwrap();
            let b = sample_fingerprint(&mut rng, 17).unwrap();
            let ab = bit_accuracy(&a, &b).unwrap();
            let ba = bit_accuracy(&b, &a).unwrap();
            assert_eq!(ab, ba);
            let anti = bit_accuracy(&a, &b.complement()).unwrap();
            assert!((ab + anti - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extraction_thresholds_logits_strictly() {
        // Saturated-positive and exactly-zero logits, via the shared rule.
        assert_eq!(
            Fingerprint::from_logits(&[50.0; 6]).unwrap().bits(),
            &[1; 6]
        );
        assert_eq!(
            Fingerprint::from_logits(&[0.0; 6]).unwrap().bits(),
            &[0; 6]
        );

        // extract_watermark agrees with the raw decoder outputs.
        let cfg = crate::training::tests::tiny_config();
        let decoder = WatermarkDecoder::new(&cfg).unwrap();
        let mut rng = derive_rng(3, "verify.test");
        let img = crate::nn::sample_normal(&mut rng, (8, 8, 3), 0.5);
        let (bits, z_hat) = extract_watermark(&decoder, &img).unwrap();
        let raw = decoder.forward_one(&img).unwrap();
        for (i, &l) in raw.iter().take(decoder.d_w()).enumerate() {
            assert_eq!(bits.bits()[i], u8::from(l > 0.0));
        }
        assert_eq!(z_hat.len(), decoder.d_z());
        assert_eq!(z_hat.values(), &raw.as_slice().unwrap()[decoder.d_w()..]);

        let wrong = crate::nn::sample_normal(&mut rng, (16, 16, 3), 0.5);
        assert!(matches!(
            extract_watermark(&decoder, &wrong),
            Err(Error::Shape(_))
        ));
    }

    fn registry_with(dir: &std::path::Path, fps: &[(&str, Fingerprint)]) -> Registry {
        let d_w = fps[0].1.len();
        let reg = Registry::open(dir.join("users.tsv"), d_w);
        for (user, w) in fps {
            register_user(&reg, user, w, "00").unwrap();
        }
        reg
    }

    #[test]
    fn exact_hit_is_a_match() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = derive_rng(4, "verify.test");
        let w1 = sample_fingerprint(&mut rng, 32).unwrap();
        let w2 = w1.complement();
        let reg = registry_with(dir.path(), &[("alice", w1.clone()), ("bob", w2)]);

        let report = trace_user(&reg, &w1, 0.9).unwrap();
        assert_eq!(report.traced_user.as_deref(), Some("alice"));
        assert_eq!(report.decision, Decision::Match);
        assert_eq!(report.per_candidate[0], ("alice".into(), 1.0));
        assert_eq!(report.per_candidate[1], ("bob".into(), 0.0));

        let text = report.to_text();
        assert!(text.contains("decision\tmatch"));
        assert!(text.contains("traced\talice"));
    }

    #[test]
    fn random_extraction_against_many_registered_users_is_no_match() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = derive_rng(5, "verify.test");
        let fps: Vec<(String, Fingerprint)> = (0..100)
            .map(|i| {
                (
                    format!("user{i}"),
                    sample_fingerprint(&mut rng, 128).unwrap(),
                )
            })
            .collect();
        let pairs: Vec<(&str, Fingerprint)> =
            fps.iter().map(|(u, w)| (u.as_str(), w.clone())).collect();
        let reg = registry_with(dir.path(), &pairs);

        let probe = sample_fingerprint(&mut rng, 128).unwrap();
        let report = trace_user(&reg, &probe, 0.9).unwrap();
        assert_eq!(report.decision, Decision::NoMatch);
        // Still traces the best-scoring user.
        assert!(report.traced_user.is_some());
        let max = report
            .per_candidate
            .iter()
            .map(|(_, a)| *a)
            .fold(0.0, f64::max);
        assert!(max < 0.9, "chance-level max accuracy was {max}");
    }

    #[test]
    fn ties_break_to_the_earliest_registered_user() {
        let dir = tempfile::tempdir().unwrap();
        // Two users whose fingerprints are both at accuracy 0.5 from probe.
        let w1 = fp(&[1, 1, 0, 0]);
        let w2 = fp(&[0, 0, 1, 1]);
        let probe = fp(&[1, 0, 1, 0]);
        let reg = registry_with(dir.path(), &[("first", w1), ("second", w2)]);
        let report = trace_user(&reg, &probe, 0.9).unwrap();
        assert_eq!(report.per_candidate[0].1, 0.5);
        assert_eq!(report.per_candidate[1].1, 0.5);
        assert_eq!(report.traced_user.as_deref(), Some("first"));
    }

    #[test]
    fn ordering_does_not_change_the_winner_without_ties() {
        let w_hit = fp(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let w_far = fp(&[0, 0, 0, 0, 0, 0, 0, 0]);
        let probe = fp(&[1, 1, 1, 1, 0, 0, 0, 1]);

        let dir = tempfile::tempdir().unwrap();
        let reg_a = Registry::open(dir.path().join("a.tsv"), 8);
        register_user(&reg_a, "hit", &w_hit, "00").unwrap();
        register_user(&reg_a, "far", &w_far, "00").unwrap();
        let reg_b = Registry::open(dir.path().join("b.tsv"), 8);
        register_user(&reg_b, "far", &w_far, "00").unwrap();
        register_user(&reg_b, "hit", &w_hit, "00").unwrap();

        let ta = trace_user(&reg_a, &probe, 0.8).unwrap();
        let tb = trace_user(&reg_b, &probe, 0.8).unwrap();
        assert_eq!(ta.traced_user.as_deref(), Some("hit"));
        assert_eq!(tb.traced_user.as_deref(), Some("hit"));
        assert_eq!(ta.decision, Decision::Match);
    }

    #[test]
    fn preconditions_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path().join("empty.tsv"), 8);
        let probe = fp(&[1; 8]);
        assert!(matches!(
            trace_user(&reg, &probe, 0.9),
            Err(Error::InvalidState(_))
        ));

        let reg = registry_with(dir.path(), &[("a", fp(&[1; 8]))]);
        for bad in [0.5, 0.2, 1.01, f64::NAN] {
            assert!(matches!(
                trace_user(&reg, &probe, bad),
                Err(Error::InvalidArgument(_))
            ));
        }
    }
}
