//! Judge interface for triplet filtering and semantic scoring.
//!
//! A judge turns a request (prompt, images, optional descriptor) into response
//! text; a response passes iff it begins with `YES`.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const SEMANTIC_PROMPT: &str = "You will be given two images:\n1. Style image A\n2. Style image B\n\n\
Your task is to determine whether these two images share the *same artistic style*.\n\
By 'same style', we refer to having similar **texture**, **line quality**, and **material or rendering characteristics**, \
not merely similar colors, lighting, or atmosphere.\n\n\
Answer only 'YES' if both images have the same style, otherwise 'NO'. Then briefly explain why.";

pub fn content_filter_prompt(caption: &str) -> String {
    format!(
        "Check if the content of this image strictly matches the caption: '{caption}'. \
Ignore color, material, and things related to style in caption, \
answer only 'YES' if it strictly matches, otherwise 'NO'. Then briefly explain why."
    )
}

pub const COUNT_FILTER_PROMPT: &str = "Check if the two images contain the same NUMBER of objects. \
Ignore any other detail change. Answer only 'YES' if the number matches, otherwise 'NO'. Then briefly explain why.";

/// What the pipeline knows about a stylized triplet without looking at pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDescriptor {
    pub category: usize,
    /// Connected components of the content mask.
    pub content_objects: usize,
    /// Connected components of the stylized mask.
    pub stylized_objects: usize,
    pub mask_iou: f64,
    /// `1 − cosine` between style features of the stylized image and its reference.
    pub style_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JudgeRequest {
    pub prompt: String,
    pub images: Vec<Raster>,
    pub descriptor: Option<ItemDescriptor>,
}

pub trait Judge {
    fn respond(&self, request: &JudgeRequest) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub pass: bool,
    pub reason: String,
}

/// Passes iff the response begins with `YES` (case-sensitive). The reason is
/// the text after the leading verdict word.
pub fn parse_verdict(response: &str) -> JudgeVerdict {
    let pass = response.starts_with("YES");
    let rest = if pass {
        &response[3..]
    } else if let Some(r) = response.strip_prefix("NO") {
        r
    } else {
        response
    };
    let reason = rest.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '.' | ',' | '-')).trim_end();
    JudgeVerdict {
        pass,
        reason: reason.to_string(),
    }
}

/// Deterministic filter: layout, object count, then stylization strength.
#[derive(Clone, Debug, PartialEq)]
pub struct MockFilterJudge {
    pub min_iou: f64,
    pub max_style_distance: f64,
}

impl Default for MockFilterJudge {
    fn default() -> Self {
        Self {
            min_iou: 0.5,
            max_style_distance: 0.5,
        }
    }
}

impl Judge for MockFilterJudge {
    fn respond(&self, request: &JudgeRequest) -> Result<String> {
        let d = request
            .descriptor
            .as_ref()
            .ok_or_else(|| Error::Judge("mock filter judge needs an item descriptor".into()))?;
        Ok(if d.mask_iou < self.min_iou {
            "NO: layout degradation".to_string()
        } else if d.content_objects != d.stylized_objects {
            "NO: object count changed".to_string()
        } else if d.style_distance > self.max_style_distance {
            "NO: poor stylization".to_string()
        } else {
            "YES: layout and style consistent".to_string()
        })
    }
}

/// HTTP judge: POST `{"images": [base64 PNG], "prompt": ..}`, expects
/// `{"verdict": ..}`. Failed calls are retried with doubling backoff.
#[derive(Clone, Debug)]
pub struct RemoteJudge {
    pub url: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
    /// Sent as a bearer token when set.
    pub token: Option<String>,
}

/// Environment variable holding the remote judge credential.
pub const JUDGE_TOKEN_ENV: &str = "STYLEMOE_JUDGE_TOKEN";

impl RemoteJudge {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(200),
            token: std::env::var(JUDGE_TOKEN_ENV).ok(),
        }
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    images: Vec<String>,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    verdict: String,
}

impl Judge for RemoteJudge {
    fn respond(&self, request: &JudgeRequest) -> Result<String> {
        let images = request
            .images
            .iter()
            .map(|im| Ok(base64::engine::general_purpose::STANDARD.encode(im.encode_png()?)))
            .collect::<Result<Vec<_>>>()?;
        let body = RemoteRequest {
            images,
            prompt: &request.prompt,
        };
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            let mut call = ureq::post(&self.url).timeout(self.timeout);
            if let Some(t) = &self.token {
                call = call.set("Authorization", &format!("Bearer {t}"));
            }
            match call.send_json(&body) {
                Ok(resp) => {
                    let parsed: RemoteResponse = resp.into_json().map_err(|e| Error::Judge(format!("judge response: {e}")))?;
                    return Ok(parsed.verdict);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Judge(format!("judge at {} unreachable: {last}", self.url)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Held {
    pub id: String,
    pub error: String,
}

/// Partition of the input: every id lands in exactly one list, in input order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<String>,
    pub rejected: Vec<Rejection>,
    pub held: Vec<Held>,
}

/// Judges every `(id, request)` with at most `max_in_flight` concurrent calls.
pub fn filter_triplets(items: &[(String, JudgeRequest)], judge: &(dyn Judge + Sync), max_in_flight: usize) -> FilterOutcome {
    let chunk = max_in_flight.max(1);
    let mut responses: Vec<Result<String>> = Vec::with_capacity(items.len());
    for group in items.chunks(chunk) {
        if group.len() == 1 {
            responses.push(judge.respond(&group[0].1));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|(_, req)| s.spawn(move || judge.respond(req))).collect();
            for h in handles {
                responses.push(h.join().unwrap_or_else(|_| Err(Error::Judge("judge call panicked".into()))));
            }
        });
    }
    let mut out = FilterOutcome::default();
    for ((id, _), resp) in items.iter().zip(responses) {
        match resp {
            Ok(text) => {
                let v = parse_verdict(&text);
                if v.pass {
                    out.kept.push(id.clone());
                } else {
                    out.rejected.push(Rejection {
                        id: id.clone(),
                        reason: v.reason,
                    });
                }
            }
            Err(e) => out.held.push(Held {
                id: id.clone(),
                error: e.to_string(),
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(iou: f64, objects: (usize, usize), distance: f64) -> JudgeRequest {
        JudgeRequest {
            prompt: String::new(),
            images: vec![],
            descriptor: Some(ItemDescriptor {
                category: 0,
                content_objects: objects.0,
                stylized_objects: objects.1,
                mask_iou: iou,
                style_distance: distance,
            }),
        }
    }

    #[test]
    fn verdict_parsing_uses_the_yes_prefix() {
        assert!(parse_verdict("YES").pass);
        assert!(parse_verdict("YES, same texture").pass);
        assert!(!parse_verdict("yes").pass);
        assert!(!parse_verdict(" YES").pass);
        assert!(!parse_verdict("NO: layout degradation").pass);
        assert_eq!(parse_verdict("NO: layout degradation").reason, "layout degradation");
        assert_eq!(parse_verdict("YES. Both use hatching.").reason, "Both use hatching.");
    }

    #[test]
    fn mock_rejects_low_iou_as_layout_degradation() {
        let items = vec![
            ("a".to_string(), request(0.3, (1, 1), 0.1)),
            ("b".to_string(), request(0.9, (1, 2), 0.1)),
            ("c".to_string(), request(0.9, (2, 2), 0.9)),
            ("d".to_string(), request(1.0, (1, 1), 0.0)),
        ];
        let out = filter_triplets(&items, &MockFilterJudge::default(), 4);
        assert_eq!(out.kept, vec!["d"]);
        let reasons: Vec<&str> = out.rejected.iter().map(|r| r.reason.as_str()).collect();
        assert_eq!(reasons, vec!["layout degradation", "object count changed", "poor stylization"]);
        assert!(out.held.is_empty());
    }

    #[test]
    fn empty_input_and_unreachable_remote() {
        let out = filter_triplets(&[], &MockFilterJudge::default(), 2);
        assert_eq!(out, FilterOutcome::default());
        let mut judge = RemoteJudge::new("http://127.0.0.1:9/judge");
        judge.retries = 0;
        judge.timeout = Duration::from_millis(200);
        let out = filter_triplets(&[("x".into(), request(1.0, (1, 1), 0.0))], &judge, 1);
        assert_eq!(out.held.len(), 1);
        assert!(out.kept.is_empty() && out.rejected.is_empty());
    }
}
