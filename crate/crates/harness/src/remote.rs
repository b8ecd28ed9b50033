//! Generic JSON-over-HTTP classifier client for transfer evaluation.
//!
//! The image is POSTed as the raw request body (PNG or PPM) with a bearer
//! token; the endpoint answers `{"labels": [{"label": .., "score": ..}, ..]}`.
//! Failures of any kind are surfaced, never retried.

use std::time::Duration;

use scaleadv::io::{encode_ppm, to_byte};
use scaleadv::Image;
use serde::Deserialize;

use crate::config::{ImageFormat, RemoteConfig};
use crate::error::{Error, Result};

/// Environment variable holding the endpoint's auth token.
pub const TOKEN_ENV: &str = "SCALEADV_REMOTE_TOKEN";

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Deserialize)]
struct Response {
    labels: Vec<LabelScore>,
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Invalid(format!("{c}-channel image cannot be written as PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
        w.write_image_data(&bytes)?;
    }
    Ok(out)
}

/// Parses and validates a response body.
pub fn parse_response(body: &str) -> Result<Vec<LabelScore>> {
    let parsed: Response = serde_json::from_str(body).map_err(|e| Error::Schema(e.to_string()))?;
    if let Some(bad) = parsed.labels.iter().find(|l| !(0.0..=1.0).contains(&l.score)) {
        return Err(Error::Schema(format!("score {} for {:?} outside [0, 1]", bad.score, bad.label)));
    }
    Ok(parsed.labels)
}

pub fn remote_classify(cfg: &RemoteConfig, token: &str, img: &Image) -> Result<Vec<LabelScore>> {
    let url = cfg.url.as_deref().ok_or_else(|| Error::Invalid("remote_url is not configured".into()))?;
    let (body, content_type) = match cfg.format {
        ImageFormat::Png => (encode_png(img)?, "image/png"),
        ImageFormat::Ppm => (encode_ppm(img)?, "image/x-portable-pixmap"),
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent
        .post(url)
        .header("Authorization", &format!("Bearer {token}"))
        .header("Content-Type", content_type)
        .send(&body[..])
        .map_err(|e| Error::Remote(e.to_string()))?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(Error::RemoteStatus(status));
    }
    let text = resp.body_mut().read_to_string().map_err(|e| Error::Remote(e.to_string()))?;
    parse_response(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    /// Benign Top-1 label, the ground truth.
    pub truth: String,
    pub benign_score: f64,
    /// Score of the truth label on the adversarial image (0 if absent).
    pub adversarial_score: f64,
    /// Benign Top-1 confident enough for the image to be evaluated.
    pub eligible: bool,
    pub success: bool,
}

/// Applies the transfer rule: the benign Top-1 must reach `truth_min`, and
/// the attack succeeds if that label's score falls below `success_max`.
pub fn transfer_outcome(cfg: &RemoteConfig, benign: &[LabelScore], adversarial: &[LabelScore]) -> Option<TransferOutcome> {
    let top = benign.iter().fold(None::<&LabelScore>, |best, l| match best {
        Some(b) if b.score >= l.score => Some(b),
        _ => Some(l),
    })?;
    let adversarial_score = adversarial.iter().filter(|l| l.label == top.label).map(|l| l.score).fold(0.0, f64::max);
    let eligible = top.score >= cfg.truth_min;
    Some(TransferOutcome {
        truth: top.label.clone(),
        benign_score: top.score,
        adversarial_score,
        eligible,
        success: eligible && adversarial_score < cfg.success_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, ExperimentKind};
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn ls(label: &str, score: f64) -> LabelScore {
        LabelScore { label: label.into(), score }
    }

    fn remote() -> RemoteConfig {
        ExperimentConfig::defaults(ExperimentKind::RemoteEval).remote
    }

    #[test]
    fn transfer_rules() {
        let cfg = remote();
        let o = transfer_outcome(&cfg, &[ls("cat", 0.8), ls("dog", 0.1)], &[ls("dog", 0.7), ls("cat", 0.09)]).unwrap();
        assert!(o.eligible && o.success);
        let o = transfer_outcome(&cfg, &[ls("cat", 0.49)], &[ls("dog", 0.9)]).unwrap();
        assert!(!o.eligible && !o.success);
        let o = transfer_outcome(&cfg, &[ls("cat", 0.8)], &[ls("cat", 0.1)]).unwrap();
        assert!(!o.success);
        let o = transfer_outcome(&cfg, &[ls("cat", 0.8)], &[ls("dog", 0.95)]).unwrap();
        assert_eq!(o.adversarial_score, 0.0);
        assert!(o.success);
        assert!(transfer_outcome(&cfg, &[], &[]).is_none());
    }

    #[test]
    fn schema_errors_are_reported() {
        assert!(matches!(parse_response("{\"labels\": 3}"), Err(Error::Schema(_))));
        assert!(matches!(parse_response("{\"labels\": [{\"label\": \"a\", \"score\": 1.5}]}"), Err(Error::Schema(_))));
        assert!(matches!(parse_response("not json"), Err(Error::Schema(_))));
    }

    /// Serves `responses` in order, one connection each; returns the
    /// captured requests.
    fn serve(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<Vec<u8>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/classify", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for resp in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                // read headers, then the announced body length
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(end) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        let head = String::from_utf8_lossy(&buf[..end]).to_ascii_lowercase();
                        let len = head
                            .lines()
                            .find_map(|l| l.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        while buf.len() < end + 4 + len {
                            let n = stream.read(&mut chunk).unwrap();
                            buf.extend_from_slice(&chunk[..n]);
                        }
                        break;
                    }
                    if n == 0 {
                        break;
                    }
                }
                stream.write_all(resp.as_bytes()).unwrap();
                seen.push(buf);
            }
            seen
        });
        (url, handle)
    }

    fn http(status: &str, body: &str) -> String {
        format!("HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len())
    }

    #[test]
    fn loopback_endpoint_is_parsed_exactly() {
        let body = r#"{"labels": [{"label": "tabby", "score": 0.625}, {"label": "lynx", "score": 0.25}]}"#;
        let (url, handle) = serve(vec![http("200 OK", body), http("503 Service Unavailable", "{}")]);
        let mut cfg = remote();
        cfg.url = Some(url);
        let img = Image::from_fn(scaleadv::Shape::new(4, 4, 1), |r, c, _| (r + c) as f64 / 6.0);
        let got = remote_classify(&cfg, "secret", &img).unwrap();
        assert_eq!(got, vec![ls("tabby", 0.625), ls("lynx", 0.25)]);
        assert!(matches!(remote_classify(&cfg, "secret", &img), Err(Error::RemoteStatus(503))));
        let requests = handle.join().unwrap();
        let first = String::from_utf8_lossy(&requests[0]).to_string();
        assert!(first.starts_with("POST /classify"));
        assert!(first.contains("Bearer secret"));
        assert!(requests[0].windows(4).any(|w| w == b"\x89PNG"));
    }

    #[test]
    fn unreachable_endpoint_is_an_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let mut cfg = remote();
        cfg.url = Some(format!("http://{addr}/"));
        cfg.timeout_secs = 2;
        let img = Image::zeros(scaleadv::Shape::new(2, 2, 1));
        assert!(matches!(remote_classify(&cfg, "t", &img), Err(Error::Remote(_))));
    }
}
