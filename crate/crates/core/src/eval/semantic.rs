//! Binary style-agreement score from a judge response.

use serde::{Deserialize, Serialize};

use crate::data::judge::{parse_verdict, Judge, JudgeRequest, SEMANTIC_PROMPT};
use crate::encoder::StyleEncoder;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Answers `YES` when the encoder cosine distance between the two images is
/// at most `max_distance`.
#[derive(Clone, Debug)]
pub struct MockSemanticJudge {
    pub encoder: StyleEncoder,
    pub max_distance: f64,
}

impl MockSemanticJudge {
    pub fn new(encoder: StyleEncoder) -> Self {
        Self {
            encoder,
            max_distance: 0.5,
        }
    }
}

impl Judge for MockSemanticJudge {
    fn respond(&self, request: &JudgeRequest) -> Result<String> {
        let [a, b] = request.images.as_slice() else {
            return Err(Error::Judge(format!("semantic judge expects 2 images, got {}", request.images.len())));
        };
        let d = 1.0 - self.encoder.embed_image(a)?.cosine(&self.encoder.embed_image(b)?)?;
        Ok(if d <= self.max_distance {
            format!("YES: style distance {d:.3}")
        } else {
            format!("NO: style distance {d:.3}")
        })
    }
}

/// 1 iff the judge's answer begins with `YES`.
pub fn score_response(response: &str) -> u8 {
    u8::from(parse_verdict(response).pass)
}

pub fn semantic_score(style: &Raster, output: &Raster, judge: &dyn Judge) -> Result<u8> {
    let request = JudgeRequest {
        prompt: SEMANTIC_PROMPT.to_string(),
        images: vec![style.clone(), output.clone()],
        descriptor: None,
    };
    Ok(score_response(&judge.respond(&request)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticScoreReport {
    /// `None` marks an item the judge failed on.
    pub scores: Vec<Option<u8>>,
    /// Mean over scored items; 0 when none were scored.
    pub mean: f64,
    pub unscored: usize,
}

pub fn aggregate(scores: &[Option<u8>]) -> SemanticScoreReport {
    let scored: Vec<u8> = scores.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|&s| s as f64).sum::<f64>() / scored.len() as f64
    };
    SemanticScoreReport {
        scores: scores.to_vec(),
        mean,
        unscored: scores.len() - scored.len(),
    }
}

/// Scores every `(style, output)` pair; judge failures are left unscored.
pub fn score_pairs(pairs: &[(Raster, Raster)], judge: &dyn Judge) -> SemanticScoreReport {
    let scores: Vec<Option<u8>> = pairs.iter().map(|(s, o)| semantic_score(s, o, judge).ok()).collect();
    aggregate(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_unscored() {
        let r = aggregate(&[Some(1), Some(0), Some(1), Some(1)]);
        assert_eq!(r.mean, 0.75);
        let r = aggregate(&[Some(1), None, Some(0)]);
        assert_eq!((r.mean, r.unscored), (0.5, 1));
        assert_eq!(aggregate(&[]).mean, 0.0);
    }

    #[test]
    fn identical_images_score_one() {
        let enc = StyleEncoder::new(Default::default(), 3).unwrap();
        let judge = MockSemanticJudge::new(enc);
        let img = Raster::filled(16, 16, [10, 200, 30]);
        assert_eq!(semantic_score(&img, &img, &judge).unwrap(), 1);
    }
}
