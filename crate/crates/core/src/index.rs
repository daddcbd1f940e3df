//! Dual embeddings, the exact flat inner-product index, and ranked-run files.
//!
//! A dual embedding is `concat(e_T, e_MM)` with no rescaling, so its inner
//! product with a passage's dual embedding is `S_T + S_MM`.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! magic "DEDRIDX1" | version u32 | hlen u64 | JSON header (IndexMeta + ids)
//! | f64 matrix, row-major, N × (d_T + d_MM)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::Passage;
use crate::encoders::{DenseEncoder, EncoderOutput, EncoderPath, InputBuilder};
use crate::error::{Error, Result};
use crate::sparse::RankedList;

const MAGIC: &[u8; 8] = b"DEDRIDX1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DualEmbedding {
    pub vector: Vec<f64>,
    pub source_id: String,
}

/// Concatenates a text-path and a multi-modal-path embedding, text first.
pub fn concat_dual(
    e_t: &EncoderOutput,
    e_mm: &EncoderOutput,
    source_id: impl Into<String>,
) -> Result<DualEmbedding> {
    if e_t.path != EncoderPath::Text || e_mm.path != EncoderPath::MultiModal {
        return Err(Error::Contract(format!(
            "dual embedding needs (T, MM) outputs, got ({}, {})",
            e_t.path, e_mm.path
        )));
    }
    let mut vector = Vec::with_capacity(e_t.dim() + e_mm.dim());
    vector.extend_from_slice(&e_t.embedding);
    vector.extend_from_slice(&e_mm.embedding);
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in dual embedding".into()));
    }
    Ok(DualEmbedding {
        vector,
        source_id: source_id.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub d_t: usize,
    pub d_mm: usize,
    pub fingerprint_t: String,
    pub fingerprint_mm: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    meta: IndexMeta,
    ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    pub meta: IndexMeta,
    pub matrix: Mat,
    pub ids: Vec<String>,
}

/// Exact top-`k` rows of `matrix` by inner product with `query`; ties by
/// ascending id. `k` larger than the row count returns every row.
pub fn exact_top_k(matrix: &Mat, ids: &[String], query: &[f64], k: usize) -> RankedList {
    let q = ndarray::ArrayView1::from(query);
    let scores = matrix.dot(&q);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| ids[*a].cmp(&ids[*b]))
    };
    let k = k.min(ids.len());
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order.truncate(k);
    RankedList(
        order
            .into_iter()
            .map(|i| (ids[i].clone(), scores[i]))
            .collect(),
    )
}

/// Embeds every passage with one encoder; rows follow `passages` order.
pub fn embed_passages(
    encoder: &dyn DenseEncoder,
    builder: &InputBuilder,
    passages: &[Passage],
) -> Result<Mat> {
    let rows: Vec<Vec<f64>> = passages
        .par_iter()
        .map(|p| {
            let (seq, visual) = builder.passage(encoder.path(), p)?;
            let out = encoder.encode(&seq, visual.as_ref())?;
            if out.dim() != encoder.dim() {
                return Err(Error::Shape(format!(
                    "encoder declared d={} but produced {} for passage {}",
                    encoder.dim(),
                    out.dim(),
                    p.passage_id
                )));
            }
            Ok(out.embedding)
        })
        .collect::<Result<_>>()?;
    let d = encoder.dim();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Mat::from_shape_vec((passages.len(), d), flat).map_err(|e| Error::Shape(e.to_string()))
}

impl FlatIndex {
    /// Row `i` is `concat(E_T(P_i), E_MM(P_i, masked))`.
    pub fn build(
        passages: &[Passage],
        encoder_t: &dyn DenseEncoder,
        encoder_mm: &dyn DenseEncoder,
        builder: &InputBuilder,
        fingerprints: (String, String),
    ) -> Result<Self> {
        if encoder_t.path() != EncoderPath::Text || encoder_mm.path() != EncoderPath::MultiModal {
            return Err(Error::Contract(
                "build_index needs a T encoder and an MM encoder".into(),
            ));
        }
        let t = embed_passages(encoder_t, builder, passages)?;
        let mm = embed_passages(encoder_mm, builder, passages)?;
        let matrix = ndarray::concatenate(ndarray::Axis(1), &[t.view(), mm.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let ids = passages.iter().map(|p| p.passage_id.clone()).collect();
        Self::from_parts(
            IndexMeta {
                d_t: encoder_t.dim(),
                d_mm: encoder_mm.dim(),
                fingerprint_t: fingerprints.0,
                fingerprint_mm: fingerprints.1,
            },
            matrix,
            ids,
        )
    }

    pub fn from_parts(meta: IndexMeta, matrix: Mat, ids: Vec<String>) -> Result<Self> {
        if matrix.nrows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} ids",
                matrix.nrows(),
                ids.len()
            )));
        }
        if matrix.ncols() != meta.d_t + meta.d_mm {
            return Err(Error::Shape(format!(
                "rows have {} columns, metadata declares {} + {}",
                matrix.ncols(),
                meta.d_t,
                meta.d_mm
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Integrity(format!(
                "duplicate passage id {dup} in index"
            )));
        }
        Ok(Self { meta, matrix, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.d_t + self.meta.d_mm
    }

    pub fn search(&self, query: &DualEmbedding, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if query.vector.len() != self.dim() {
            return Err(Error::Contract(format!(
                "query has {} dimensions, index has {}",
                query.vector.len(),
                self.dim()
            )));
        }
        Ok(exact_top_k(&self.matrix, &self.ids, &query.vector, k))
    }

    /// Mean L2 norm of the text half and the multi-modal half of the rows.
    pub fn half_norms(&self) -> (f64, f64) {
        let n = self.len().max(1) as f64;
        let (mut t, mut mm) = (0.0, 0.0);
        for row in self.matrix.outer_iter() {
            t += row
                .iter()
                .take(self.meta.d_t)
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            mm += row
                .iter()
                .skip(self.meta.d_t)
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
        }
        (t / n, mm / n)
    }

    /// Fails when the index was built from different checkpoints.
    pub fn check_fingerprints(&self, t: &str, mm: &str) -> Result<()> {
        if self.meta.fingerprint_t != t || self.meta.fingerprint_mm != mm {
            return Err(Error::Integrity(
                "index was built from different encoder checkpoints; rebuild it with `build-index`"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&IndexHeader {
            meta: self.meta.clone(),
            ids: self.ids.clone(),
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + self.matrix.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.matrix.iter() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Integrity(format!("index file: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: IndexHeader =
            serde_json::from_slice(bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated"))?)
                .map_err(|e| bad(&e.to_string()))?;
        let cols = header.meta.d_t + header.meta.d_mm;
        let data = &bytes[20 + hlen..];
        if data.len() != header.ids.len() * cols * 8 {
            return Err(bad("matrix size does not match metadata"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let matrix = Mat::from_shape_vec((header.ids.len(), cols), values)
            .map_err(|e| bad(&e.to_string()))?;
        Self::from_parts(header.meta, matrix, header.ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Ranked runs keyed by query id.
pub type Run = BTreeMap<String, RankedList>;

/// Writes the standard six-column run format:
/// `query_id Q0 passage_id rank score tag`.
pub fn write_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    let mut body = String::new();
    for (qid, list) in run {
        for (rank, (pid, score)) in list.0.iter().enumerate() {
            writeln!(body, "{qid} Q0 {pid} {} {score:.10} {tag}", rank + 1)
                .expect("write to string");
        }
    }
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_run(path: &Path) -> Result<Run> {
    let body = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(parse_err(format!(
                "expected 6 columns, found {}",
                cols.len()
            )));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|e| parse_err(format!("rank: {e}")))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|e| parse_err(format!("score: {e}")))?;
        rows.entry(cols[0].to_string())
            .or_default()
            .push((rank, cols[2].to_string(), score));
    }
    Ok(rows
        .into_iter()
        .map(|(q, mut r)| {
            r.sort_by_key(|(rank, _, _)| *rank);
            (
                q,
                RankedList(r.into_iter().map(|(_, id, s)| (id, s)).collect()),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn out(v: &[f64], path: EncoderPath) -> EncoderOutput {
        EncoderOutput {
            embedding: v.to_vec(),
            path,
        }
    }

    fn meta(d_t: usize, d_mm: usize) -> IndexMeta {
        IndexMeta {
            d_t,
            d_mm,
            fingerprint_t: "t".into(),
            fingerprint_mm: "mm".into(),
        }
    }

    #[test]
    fn concatenation_is_text_first() {
        let d = concat_dual(
            &out(&[1.0, 0.0], EncoderPath::Text),
            &out(&[0.0, 2.0], EncoderPath::MultiModal),
            "x",
        )
        .unwrap();
        assert_eq!(d.vector, vec![1.0, 0.0, 0.0, 2.0]);
        assert!(concat_dual(
            &out(&[1.0], EncoderPath::MultiModal),
            &out(&[1.0], EncoderPath::Text),
            "x"
        )
        .is_err());
    }

    #[test]
    fn zero_query_orders_by_id() {
        let ids: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let idx = FlatIndex::from_parts(meta(1, 1), Mat::from_elem((3, 2), 0.3), ids).unwrap();
        let q = DualEmbedding {
            vector: vec![0.0, 0.0],
            source_id: "q".into(),
        };
        let r = idx.search(&q, 5).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(r.0.iter().all(|(_, s)| *s == 0.0));
        let wrong = DualEmbedding {
            vector: vec![0.0],
            source_id: "q".into(),
        };
        assert!(matches!(idx.search(&wrong, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn index_file_roundtrip_and_rejection() {
        let ids: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
        let m = Mat::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 / 7.0);
        let idx = FlatIndex::from_parts(meta(2, 1), m, ids).unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(FlatIndex::from_bytes(&bytes).unwrap(), idx);
        assert!(FlatIndex::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(idx.check_fingerprints("t", "other").is_err());
    }

    fn brute_force(m: &Mat, ids: &[String], q: &[f64], k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = (0..m.nrows())
            .map(|i| {
                (
                    ids[i].clone(),
                    (0..m.ncols()).map(|j| m[[i, j]] * q[j]).sum(),
                )
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn search_matches_exhaustive_scoring(
            (n, d_t, d_mm, vals, q) in (1usize..40, 1usize..6, 1usize..6).prop_flat_map(|(n, a, b)| (
                Just(n), Just(a), Just(b),
                prop::collection::vec(-5.0f64..5.0, n * (a + b)),
                prop::collection::vec(-5.0f64..5.0, a + b),
            )),
            k in 1usize..8,
        ) {
            let ids: Vec<String> = (0..n).map(|i| format!("p{i:03}")).collect();
            let m = Mat::from_shape_vec((n, d_t + d_mm), vals).unwrap();
            let idx = FlatIndex::from_parts(meta(d_t, d_mm), m.clone(), ids.clone()).unwrap();
            let got = idx.search(&DualEmbedding { vector: q.clone(), source_id: "q".into() }, k).unwrap();
            let want = brute_force(&m, &ids, &q, k);
            prop_assert_eq!(got.0.len(), want.len());
            for ((gi, gs), (wi, ws)) in got.0.iter().zip(&want) {
                prop_assert_eq!(gi, wi);
                prop_assert!((gs - ws).abs() < 1e-9);
            }
        }

        #[test]
        fn dual_score_is_the_sum_of_path_scores(
            (qt, qm, pt, pm) in (1usize..8, 1usize..8).prop_flat_map(|(a, b)| (
                prop::collection::vec(-3.0f64..3.0, a),
                prop::collection::vec(-3.0f64..3.0, b),
                prop::collection::vec(-3.0f64..3.0, a),
                prop::collection::vec(-3.0f64..3.0, b),
            )),
        ) {
            let q = concat_dual(&out(&qt, EncoderPath::Text), &out(&qm, EncoderPath::MultiModal), "q").unwrap();
            let p = concat_dual(&out(&pt, EncoderPath::Text), &out(&pm, EncoderPath::MultiModal), "p").unwrap();
            let dual = crate::encoders::dot(&q.vector, &p.vector);
            let parts = crate::encoders::dot(&qt, &pt) + crate::encoders::dot(&qm, &pm);
            prop_assert!((dual - parts).abs() < 1e-9);
        }
    }

    #[test]
    fn run_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.trec");
        let mut run = Run::new();
        run.insert(
            "q1".into(),
            RankedList(vec![("p2".into(), 3.5), ("p1".into(), -1.25)]),
        );
        run.insert("q2".into(), RankedList(vec![("p9".into(), 0.0)]));
        write_run(&path, &run, "dedr").unwrap();
        let body = fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("q1 Q0 p2 1 3.5000000000 dedr\n"));
        assert_eq!(read_run(&path).unwrap(), run);
    }
}
