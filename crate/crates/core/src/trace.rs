//! Layer traces and their JSON-lines encoding.
//!
//! A trace file holds one JSON object per line, one line per `(sample, layer)`.
//! Records of one sample are contiguous and ordered by layer, starting at
//! layer 0 (the embeddings) and ending at `num_layers`. Fields:
//!
//! | field         | type                          | notes |
//! |---------------|-------------------------------|-------|
//! | `sample_id`   | string                        | |
//! | `layer`       | integer                       | `0..=num_layers` |
//! | `num_layers`  | integer                       | same on every record of a sample |
//! | `hidden_dim`  | integer                       | row width of `hidden` |
//! | `tokens`      | array of token objects        | layer 0 only |
//! | `pairing`     | `"reference"` / `"mismatched"`| layer 0 only, optional |
//! | `pair_id`     | string                        | layer 0 only, optional |
//! | `live`        | array of token indices        | optional; absent means every token |
//! | `hidden`      | `N x hidden_dim` numbers      | rows of dead tokens are ignored |
//! | `attention`   | `{queries, weights}`          | optional, never on layer 0 |
//!
//! A token object is `{"index", "modality", "position_id", "segment"}` with
//! `modality` one of `system`, `visual`, `textual` and `index` equal to its
//! position in the array. `attention.queries` lists the recorded query token
//! indices and `attention.weights` has shape `heads x |queries| x N`. Every
//! row is a distribution over the causal live keys: nonnegative, zero on keys
//! after the query or not live, summing to 1 within [`ATTENTION_SUM_TOLERANCE`].
//! Numbers are written as 32-bit floats and promoted to f64 on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const ATTENTION_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    System,
    Visual,
    Textual,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "system" => Ok(Modality::System),
            "visual" | "vision" => Ok(Modality::Visual),
            "textual" | "text" => Ok(Modality::Textual),
            other => Err(Error::param("modality", format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    Reference,
    Mismatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub index: usize,
    pub modality: Modality,
    pub position_id: usize,
    #[serde(default)]
    pub segment: usize,
}

/// Attention rows for a subset of queries: `heads[h].row(q)` is the
/// distribution of query `queries[q]` over all tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub queries: Vec<usize>,
    pub heads: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub hidden: Matrix,
    pub live: Option<Vec<bool>>,
    pub attention: Option<AttentionRecord>,
}

impl LayerRecord {
    pub fn is_live(&self, token: usize) -> bool {
        self.live.as_ref().map_or(true, |l| l[token])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub sample_id: String,
    pub tokens: Vec<TokenInfo>,
    pub pairing: Option<Pairing>,
    pub pair_id: Option<String>,
    /// `layers[0]` holds the embeddings, `layers[l]` the output of layer `l`.
    pub layers: Vec<LayerRecord>,
}

impl LayerTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn tokens_of(&self, modality: Modality) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .filter(move |t| t.modality == modality)
            .map(|t| t.index)
    }

    pub fn layer(&self, l: usize) -> Result<&LayerRecord> {
        self.layers.get(l).ok_or(Error::MissingLayer {
            layer: l,
            what: "hidden states",
        })
    }

    pub fn attention(&self, l: usize) -> Result<&AttentionRecord> {
        self.layer(l)?.attention.as_ref().ok_or(Error::MissingLayer {
            layer: l,
            what: "attention",
        })
    }

    /// Highest layer with recorded attention, if any.
    pub fn attention_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, r)| r.attention.is_some())
            .map(|(l, _)| l)
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttention {
    queries: Vec<usize>,
    weights: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    sample_id: String,
    layer: usize,
    num_layers: usize,
    hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<TokenInfo>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairing: Option<Pairing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    live: Option<Vec<usize>>,
    hidden: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention: Option<RawAttention>,
}

fn to_f32_rows(m: &Matrix) -> Vec<Vec<f32>> {
    m.iter_rows()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect()
}

pub fn write_traces(path: &Path, traces: &[LayerTrace]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_traces_to(&mut out, traces)?;
    out.flush()?;
    Ok(())
}

pub fn write_traces_to<W: Write>(out: &mut W, traces: &[LayerTrace]) -> Result<()> {
    for trace in traces {
        let num_layers = trace.num_layers();
        for (l, rec) in trace.layers.iter().enumerate() {
            let first = l == 0;
            let raw = RawRecord {
                sample_id: trace.sample_id.clone(),
                layer: l,
                num_layers,
                hidden_dim: rec.hidden.cols(),
                tokens: first.then(|| trace.tokens.clone()),
                pairing: if first { trace.pairing } else { None },
                pair_id: if first { trace.pair_id.clone() } else { None },
                live: rec
                    .live
                    .as_ref()
                    .map(|live| (0..live.len()).filter(|&i| live[i]).collect()),
                hidden: to_f32_rows(&rec.hidden),
                attention: rec.attention.as_ref().map(|a| RawAttention {
                    queries: a.queries.clone(),
                    weights: a.heads.iter().map(to_f32_rows).collect(),
                }),
            };
            serde_json::to_writer(&mut *out, &raw)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads and validates a trace file; errors carry 1-based line numbers.
pub fn read_traces(path: &Path) -> Result<Vec<LayerTrace>> {
    let file = File::open(path)?;
    read_traces_from(BufReader::new(file), path)
}

pub fn read_traces_from<R: BufRead>(reader: R, path: &Path) -> Result<Vec<LayerTrace>> {
    let mut traces: Vec<LayerTrace> = Vec::new();
    let mut expected_layers = 0;
    let mut open = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::TraceSchema {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| fail(format!("malformed record: {e}")))?;
        if raw.layer == 0 {
            if open {
                return Err(fail(format!(
                    "sample `{}` ended after layer {} of {}",
                    traces.last().map_or("", |t| t.sample_id.as_str()),
                    traces.last().map_or(0, |t| t.layers.len() - 1),
                    expected_layers
                )));
            }
            let tokens = raw
                .tokens
                .clone()
                .ok_or_else(|| fail("layer 0 record must carry the token table".into()))?;
            check_tokens(&tokens).map_err(&fail)?;
            traces.push(LayerTrace {
                sample_id: raw.sample_id.clone(),
                tokens,
                pairing: raw.pairing,
                pair_id: raw.pair_id.clone(),
                layers: Vec::new(),
            });
            expected_layers = raw.num_layers;
            open = true;
        } else {
            if raw.tokens.is_some() || raw.pairing.is_some() || raw.pair_id.is_some() {
                return Err(fail(
                    "tokens, pairing and pair_id belong on the layer 0 record only".into(),
                ));
            }
            let Some(trace) = traces.last() else {
                return Err(fail("first record of a sample must be layer 0".into()));
            };
            if !open || raw.sample_id != trace.sample_id {
                return Err(fail(format!(
                    "record for sample `{}` layer {} has no preceding layer 0",
                    raw.sample_id, raw.layer
                )));
            }
            if raw.layer != trace.layers.len() {
                return Err(fail(format!(
                    "expected layer {}, found {}",
                    trace.layers.len(),
                    raw.layer
                )));
            }
            if raw.num_layers != expected_layers {
                return Err(fail(format!(
                    "num_layers changed from {expected_layers} to {}",
                    raw.num_layers
                )));
            }
        }
        let trace = traces.last_mut().expect("trace opened above");
        let record = convert_record(raw, &trace.tokens).map_err(&fail)?;
        trace.layers.push(record);
        if trace.layers.len() == expected_layers + 1 {
            open = false;
        }
    }
    if open {
        let t = traces.last().expect("open trace exists");
        return Err(Error::TraceSchema {
            path: path.to_path_buf(),
            line: 0,
            message: format!(
                "sample `{}` is truncated: {} of {} layers",
                t.sample_id,
                t.layers.len() - 1,
                expected_layers
            ),
        });
    }
    Ok(traces)
}

fn check_tokens(tokens: &[TokenInfo]) -> std::result::Result<(), String> {
    if tokens.is_empty() {
        return Err("token table is empty".into());
    }
    for (i, t) in tokens.iter().enumerate() {
        if t.index != i {
            return Err(format!("token {i} has index {}", t.index));
        }
    }
    Ok(())
}

fn convert_record(raw: RawRecord, tokens: &[TokenInfo]) -> std::result::Result<LayerRecord, String> {
    let n = tokens.len();
    let d = raw.hidden_dim;
    if raw.hidden.len() != n {
        return Err(format!("hidden has {} rows, expected {n}", raw.hidden.len()));
    }
    let mut data = Vec::with_capacity(n * d);
    for (t, row) in raw.hidden.iter().enumerate() {
        if row.len() != d {
            return Err(format!("hidden row {t} has {} entries, expected {d}", row.len()));
        }
        data.extend(row.iter().map(|&v| v as f64));
    }
    let hidden = Matrix::from_vec(n, d, data).map_err(|e| format!("hidden: {e}"))?;

    let live = match raw.live {
        None => None,
        Some(ids) => {
            let mut mask = vec![false; n];
            let mut prev = None;
            for id in ids {
                if id >= n {
                    return Err(format!("live token {id} out of range"));
                }
                if prev.map_or(false, |p| id <= p) {
                    return Err("live indices must be strictly increasing".into());
                }
                mask[id] = true;
                prev = Some(id);
            }
            Some(mask)
        }
    };
    let is_live = |t: usize| live.as_ref().map_or(true, |m: &Vec<bool>| m[t]);

    let attention = match raw.attention {
        None => None,
        Some(_) if raw.layer == 0 => return Err("layer 0 cannot carry attention".into()),
        Some(att) => {
            let q = att.queries.len();
            if q == 0 || att.weights.is_empty() {
                return Err("attention needs at least one head and one query".into());
            }
            for &qi in &att.queries {
                if qi >= n {
                    return Err(format!("attention query {qi} out of range"));
                }
                if !is_live(qi) {
                    return Err(format!("attention query {qi} is not live"));
                }
            }
            let mut heads = Vec::with_capacity(att.weights.len());
            for (h, rows) in att.weights.iter().enumerate() {
                if rows.len() != q {
                    return Err(format!("head {h} has {} rows, expected {q}", rows.len()));
                }
                let mut data = Vec::with_capacity(q * n);
                for (r, row) in rows.iter().enumerate() {
                    if row.len() != n {
                        return Err(format!("head {h} row {r} has {} keys, expected {n}", row.len()));
                    }
                    let query = att.queries[r];
                    let mut sum = 0.0;
                    for (k, &w) in row.iter().enumerate() {
                        let w = w as f64;
                        if !w.is_finite() || w < 0.0 {
                            return Err(format!("head {h} row {r} key {k}: weight {w} is not a probability"));
                        }
                        if w != 0.0 && (k > query || !is_live(k)) {
                            return Err(format!(
                                "head {h} row {r}: nonzero weight on masked key {k}"
                            ));
                        }
                        sum += w;
                    }
                    if (sum - 1.0).abs() > ATTENTION_SUM_TOLERANCE {
                        return Err(format!("head {h} row {r} sums to {sum}, expected 1"));
                    }
                    data.extend(row.iter().map(|&w| w as f64));
                }
                heads.push(Matrix::from_vec(q, n, data).map_err(|e| e.to_string())?);
            }
            Some(AttentionRecord {
                queries: att.queries,
                heads,
            })
        }
    };
    Ok(LayerRecord {
        hidden,
        live,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn tiny_trace() -> LayerTrace {
        let tokens = vec![
            TokenInfo { index: 0, modality: Modality::System, position_id: 0, segment: 0 },
            TokenInfo { index: 1, modality: Modality::Visual, position_id: 1, segment: 0 },
            TokenInfo { index: 2, modality: Modality::Textual, position_id: 2, segment: 1 },
        ];
        let hidden = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        let att = AttentionRecord {
            queries: vec![2],
            heads: vec![Matrix::from_rows(&[vec![0.25, 0.25, 0.5]]).unwrap()],
        };
        LayerTrace {
            sample_id: "s0".into(),
            tokens,
            pairing: Some(Pairing::Reference),
            pair_id: Some("p".into()),
            layers: vec![
                LayerRecord { hidden: hidden.clone(), live: None, attention: None },
                LayerRecord { hidden, live: Some(vec![true, true, true]), attention: Some(att) },
            ],
        }
    }

    fn encode(traces: &[LayerTrace]) -> String {
        let mut buf = Vec::new();
        write_traces_to(&mut buf, traces).unwrap();
        String::from_utf8(buf).unwrap()
    }

    fn decode(text: &str) -> Result<Vec<LayerTrace>> {
        read_traces_from(Cursor::new(text), Path::new("mem.jsonl"))
    }

    #[test]
    fn round_trip() {
        let t = tiny_trace();
        let text = encode(&[t.clone(), LayerTrace { sample_id: "s1".into(), ..t.clone() }]);
        assert_eq!(text.lines().count(), 4);
        let back = decode(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], t);
    }

    fn schema_error(text: &str) -> (usize, String) {
        match decode(text) {
            Err(Error::TraceSchema { line, message, .. }) => (line, message),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_attention_row() {
        let text = encode(&[tiny_trace()]).replace("[[[0.25,0.25,0.5]]]", "[[[0.25,0.25,0.25]]]");
        let (line, msg) = schema_error(&text);
        assert_eq!(line, 2);
        assert!(msg.contains("sums to"), "{msg}");
    }

    #[test]
    fn rejects_structural_problems() {
        let text = encode(&[tiny_trace()]);
        let first = text.lines().next().unwrap();
        let (line, msg) = schema_error(first);
        assert_eq!(line, 0);
        assert!(msg.contains("truncated"), "{msg}");

        let second = text.lines().nth(1).unwrap();
        let (line, _) = schema_error(second);
        assert_eq!(line, 1);

        let (line, msg) = schema_error(&format!("{first}\n{{\"nope\":1}}\n"));
        assert_eq!(line, 2);
        assert!(msg.contains("malformed"));

        let causal = text.replace("\"queries\":[2]", "\"queries\":[1]");
        let (_, msg) = schema_error(&causal);
        assert!(msg.contains("masked key 2"), "{msg}");
    }
}
