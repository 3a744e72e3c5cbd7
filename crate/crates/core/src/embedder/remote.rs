use ndarray::Array2;
use serde_json::{json, Value};

use super::{check_texts, l2_normalize, EmbedError, Embedder, EmbeddingBackendConfig, EmbeddingMatrix};
use crate::http::{HttpError, JsonClient, RetryPolicy, Transport};

/// Client for a `POST {"texts": [...]} -> {"embeddings": [[...], ...]}` service.
pub struct RemoteEmbedder {
    cfg: EmbeddingBackendConfig,
    client: JsonClient,
}

impl RemoteEmbedder {
    pub fn new(cfg: EmbeddingBackendConfig, transport: Box<dyn Transport>, retry: RetryPolicy) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let endpoint = cfg.endpoint.clone().unwrap_or_default();
        let client = JsonClient::new(transport, endpoint, retry, cfg.auth_env_var.clone());
        Ok(Self { cfg, client })
    }

    fn embed_chunk(&self, chunk: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let out = self.client.call(&json!({ "texts": chunk }), &[])?;
        let rows = out
            .body
            .get("embeddings")
            .and_then(Value::as_array)
            .ok_or_else(|| HttpError::Malformed("missing `embeddings` array".into()))?;
        if rows.len() != chunk.len() {
            return Err(EmbedError::RowMismatch {
                expected: chunk.len(),
                got: rows.len(),
            });
        }
        rows.iter()
            .map(|row| {
                let row = row
                    .as_array()
                    .ok_or_else(|| HttpError::Malformed("embedding row is not an array".into()))?;
                if row.len() != self.cfg.dimension {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.cfg.dimension,
                        got: row.len(),
                    });
                }
                // serde_json maps NaN/Infinity to null, so a missing number is non-finite.
                row.iter()
                    .map(|v| v.as_f64().filter(|x| x.is_finite()).ok_or(EmbedError::NonFinite { row: 0 }))
                    .collect()
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn backend_id(&self) -> String {
        self.cfg.backend_id()
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        check_texts(texts)?;
        let chunks: Vec<&[String]> = texts.chunks(self.cfg.batch_size).collect();
        let lanes = self.cfg.max_in_flight.max(1);
        let mut results: Vec<Option<Result<Vec<Vec<f64>>, EmbedError>>> = (0..chunks.len()).map(|_| None).collect();

        // Each lane handles every `lanes`-th chunk, so at most `lanes` requests are in flight.
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..lanes.min(chunks.len()))
                .map(|lane| {
                    let chunks = &chunks;
                    scope.spawn(move || {
                        (lane..chunks.len())
                            .step_by(lanes)
                            .map(|i| (i, self.embed_chunk(chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("embedding worker panicked") {
                    results[i] = Some(r);
                }
            }
        });

        let d = self.cfg.dimension;
        let mut values = Array2::zeros((texts.len(), d));
        let mut row_idx = 0;
        for (chunk_idx, r) in results.into_iter().enumerate() {
            let rows = r.expect("every chunk processed").map_err(|e| match e {
                EmbedError::NonFinite { .. } => EmbedError::NonFinite {
                    row: chunk_idx * self.cfg.batch_size,
                },
                other => other,
            })?;
            for mut row in rows {
                if self.cfg.normalize {
                    l2_normalize(&mut row);
                }
                values.row_mut(row_idx).assign(&ndarray::ArrayView1::from(&row));
                row_idx += 1;
            }
        }
        EmbeddingMatrix::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::BackendKind;
    use crate::http::testing::*;
    use crate::http::HttpResponse;

    fn cfg(dimension: usize, batch_size: usize) -> EmbeddingBackendConfig {
        EmbeddingBackendConfig {
            kind: BackendKind::Remote,
            endpoint: Some("http://embed.test/v1".into()),
            dimension,
            batch_size,
            auth_env_var: None,
            normalize: true,
            seed: 0,
            max_in_flight: 3,
            max_attempts: 5,
        }
    }

    /// Answers each request with `[len(text), 1, 0, ...]` rows of width `dim`.
    fn echo_lengths(dim: usize) -> ScriptedTransport {
        ScriptedTransport::answering(move |body| {
            let rows: Vec<Vec<f64>> = body["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| {
                    let mut r = vec![0.0; dim];
                    r[0] = t.as_str().unwrap().len() as f64;
                    r[1] = 1.0;
                    r
                })
                .collect();
            HttpResponse {
                status: 200,
                body: serde_json::to_string(&json!({ "embeddings": rows })).unwrap(),
            }
        })
    }

    #[test]
    fn batches_requests_and_keeps_order() {
        let t = echo_lengths(4);
        let e = RemoteEmbedder::new(cfg(4, 3), Box::new(t.clone()), fast_retry()).unwrap();
        let texts: Vec<String> = (1..=10).map(|n| "x".repeat(n)).collect();
        let m = e.embed(&texts).unwrap();
        assert_eq!(t.request_count(), 4); // ceil(10 / 3)
        for req in t.requests.lock().unwrap().iter() {
            assert!(req.0["texts"].as_array().unwrap().len() <= 3);
        }
        for (i, row) in m.values().rows().into_iter().enumerate() {
            let len = (i + 1) as f64;
            let norm = (len * len + 1.0).sqrt();
            assert!((row[0] - len / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let t = echo_lengths(48);
        let e = RemoteEmbedder::new(cfg(64, 8), Box::new(t), fast_retry()).unwrap();
        assert!(matches!(
            e.embed(&["a".to_string()]),
            Err(EmbedError::DimensionMismatch { expected: 64, got: 48 })
        ));
    }

    #[test]
    fn nan_in_response_is_an_error() {
        // NaN cannot be written in JSON; services that emit it send null or the bare token.
        for body in [r#"{"embeddings": [[1.0, null]]}"#, r#"{"embeddings": [[1.0, NaN]]}"#] {
            let t = ScriptedTransport::with_responses(vec![ok(body)]);
            let e = RemoteEmbedder::new(cfg(2, 8), Box::new(t), fast_retry()).unwrap();
            let err = e.embed(&["a".to_string()]).unwrap_err();
            assert!(matches!(err, EmbedError::NonFinite { .. } | EmbedError::Http(_)), "{err}");
        }
    }

    #[test]
    fn retries_server_errors() {
        let t = ScriptedTransport::with_responses(vec![status(500), status(429), ok(r#"{"embeddings": [[3.0, 4.0]]}"#)]);
        let e = RemoteEmbedder::new(cfg(2, 8), Box::new(t.clone()), fast_retry()).unwrap();
        let m = e.embed(&["a".to_string()]).unwrap();
        assert_eq!(t.request_count(), 3);
        assert!((m.row(0)[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn wrong_row_count_is_an_error() {
        let t = ScriptedTransport::with_responses(vec![ok(r#"{"embeddings": [[1.0, 0.0]]}"#)]);
        let e = RemoteEmbedder::new(cfg(2, 8), Box::new(t), fast_retry()).unwrap();
        assert!(matches!(
            e.embed(&["a".to_string(), "b".to_string()]),
            Err(EmbedError::RowMismatch { expected: 2, got: 1 })
        ));
    }
}
