//! Sign codes, packed Hamming search and retrieval metrics.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::labels::LabelMatrix;
use crate::matrix::Matrix;

/// `n` codes of `r` bits, each packed into `⌈r/64⌉` little-endian words.
/// Bit `k` of code `i` is 1 iff component `k` is `+1`; pad bits are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCodeSet {
    n: usize,
    code_len: usize,
    words: usize,
    bits: Vec<u64>,
}

impl HashCodeSet {
    pub fn from_words(n: usize, code_len: usize, bits: Vec<u64>) -> Result<Self> {
        if code_len == 0 {
            return Err(invalid("hash codes", "code length must be at least 1"));
        }
        let words = code_len.div_ceil(64);
        if bits.len() != n * words {
            return Err(Error::Shape(format!(
                "{} words for {n} codes of {code_len} bits",
                bits.len()
            )));
        }
        if !code_len.is_multiple_of(64) {
            let pad = !0u64 << (code_len % 64);
            if bits.chunks(words).any(|c| c[words - 1] & pad != 0) {
                return Err(invalid("hash codes", "nonzero pad bits"));
            }
        }
        Ok(Self {
            n,
            code_len,
            words,
            bits,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn code_len(&self) -> usize {
        self.code_len
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    /// Code `i` expanded to `±1`.
    pub fn signs(&self, i: usize) -> Vec<f64> {
        let code = self.code(i);
        (0..self.code_len)
            .map(|k| if code[k / 64] >> (k % 64) & 1 == 1 { 1.0 } else { -1.0 })
            .collect()
    }
}

/// `sgn` of every entry of `f`, with `sgn(0) = +1`.
pub fn encode(f: &Matrix) -> Result<HashCodeSet> {
    if !f.is_finite() {
        return Err(Error::NonFinite("hash activations".into()));
    }
    let code_len = f.cols();
    let words = code_len.div_ceil(64);
    let mut bits = vec![0u64; f.rows() * words];
    for (i, row) in f.iter_rows().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if v >= 0.0 {
                bits[i * words + k / 64] |= 1u64 << (k % 64);
            }
        }
    }
    HashCodeSet::from_words(f.rows(), code_len, bits)
}

/// Popcount of `a XOR b`.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("codes of {} and {} words", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum())
}

fn check_code_len(query: &[u64], db: &HashCodeSet) -> Result<()> {
    if query.len() != db.words {
        return Err(Error::Shape(format!(
            "query of {} words against codes of {} bits",
            query.len(),
            db.code_len
        )));
    }
    Ok(())
}

/// Database indices by ascending Hamming distance to `query`, ties by
/// ascending index. Counting sort over the `r + 1` possible distances.
pub fn rank_database(query: &[u64], db: &HashCodeSet) -> Result<Vec<usize>> {
    check_code_len(query, db)?;
    let dist: Vec<usize> = (0..db.n)
        .map(|j| {
            query
                .iter()
                .zip(db.code(j))
                .map(|(x, y)| (x ^ y).count_ones() as usize)
                .sum()
        })
        .collect();
    let mut start = vec![0usize; db.code_len + 2];
    for &d in &dist {
        start[d + 1] += 1;
    }
    for d in 1..start.len() {
        start[d] += start[d - 1];
    }
    let mut order = vec![0usize; db.n];
    for (j, &d) in dist.iter().enumerate() {
        order[start[d]] = j;
        start[d] += 1;
    }
    Ok(order)
}

/// `(1/R)·Σ_{relevant positions p} precision@p` over the full ranking;
/// 0 when nothing is relevant. `relevant` is indexed by database item.
pub fn average_precision(ranking: &[usize], relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (p, &j) in ranking.iter().enumerate() {
        if relevant[j] {
            hits += 1;
            sum += hits as f64 / (p + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Fraction of relevant items among the first `min(k, len)` of `ranking`.
pub fn precision_at_k(ranking: &[usize], relevant: &[bool], k: usize) -> f64 {
    let k = k.min(ranking.len());
    if k == 0 {
        return 0.0;
    }
    ranking[..k].iter().filter(|&&j| relevant[j]).count() as f64 / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Modality-1 queries against a modality-2 database.
    OneToTwo,
    TwoToOne,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::OneToTwo => "1to2",
            Direction::TwoToOne => "2to1",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::OneToTwo => Direction::TwoToOne,
            Direction::TwoToOne => Direction::OneToTwo,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1to2" => Ok(Direction::OneToTwo),
            "2to1" => Ok(Direction::TwoToOne),
            other => Err(invalid("direction", format!("{other:?} (expected 1to2 or 2to1)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub direction: Direction,
    /// Mean of `average_precision` over queries.
    pub map: f64,
    pub precision_at_k: Vec<(usize, f64)>,
    /// Per-query average precision, in query order.
    pub ap: Vec<f64>,
}

/// MAP and precision@k of `query` codes against `db` codes; an item is
/// relevant iff it shares a label with the query.
pub fn evaluate(
    query: &HashCodeSet,
    db: &HashCodeSet,
    labels_query: &LabelMatrix,
    labels_db: &LabelMatrix,
    ks: &[usize],
    direction: Direction,
) -> Result<EvalReport> {
    if query.n == 0 {
        return Err(invalid("evaluation", "empty query set"));
    }
    if query.code_len != db.code_len {
        return Err(Error::Shape(format!(
            "query codes of {} bits, database codes of {} bits",
            query.code_len, db.code_len
        )));
    }
    if labels_query.n() != query.n || labels_db.n() != db.n || labels_query.num_labels() != labels_db.num_labels() {
        return Err(Error::Shape("labels do not match the code sets".into()));
    }
    let per_query: Vec<(f64, Vec<f64>)> = (0..query.n)
        .into_par_iter()
        .map(|i| {
            let ranking = rank_database(query.code(i), db).expect("code lengths checked");
            let relevant: Vec<bool> = (0..db.n)
                .map(|j| labels_query.labels(i).iter().any(|&s| labels_db.contains(j, s)))
                .collect();
            let precisions = ks.iter().map(|&k| precision_at_k(&ranking, &relevant, k)).collect();
            (average_precision(&ranking, &relevant), precisions)
        })
        .collect();
    let nq = query.n as f64;
    let ap: Vec<f64> = per_query.iter().map(|(a, _)| *a).collect();
    let map = ap.iter().sum::<f64>() / nq;
    let precision_at_k = ks
        .iter()
        .enumerate()
        .map(|(idx, &k)| (k, per_query.iter().map(|(_, p)| p[idx]).sum::<f64>() / nq))
        .collect();
    Ok(EvalReport {
        direction,
        map,
        precision_at_k,
        ap,
    })
}

/// Writes `direction,map,precision@k…` rows; all reports must share `ks`.
pub fn write_eval_csv<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ks: Vec<usize> = reports
        .first()
        .map_or_else(Vec::new, |r| r.precision_at_k.iter().map(|p| p.0).collect());
    let mut header = vec!["direction".to_string(), "map".to_string()];
    header.extend(ks.iter().map(|k| format!("precision@{k}")));
    w.write_record(&header)?;
    for r in reports {
        if r.precision_at_k.iter().map(|p| p.0).ne(ks.iter().copied()) {
            return Err(invalid("evaluation reports", "differing precision cut-offs"));
        }
        let mut row = vec![r.direction.tag().to_string(), r.map.to_string()];
        row.extend(r.precision_at_k.iter().map(|p| p.1.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn codes_from_signs(rows: &[Vec<f64>]) -> HashCodeSet {
        encode(&Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn encode_examples() {
        let c = codes_from_signs(&[vec![0.3, -0.2], vec![0.0, 0.0]]);
        assert_eq!(c.signs(0), vec![1.0, -1.0]);
        assert_eq!(c.signs(1), vec![1.0, 1.0]);

        let mut g = rng::seeded(3);
        let f = Matrix::from_fn(5, 70, |_, _| rng::normal(&mut g, 1.0));
        let mut neg = f.clone();
        neg.scale(-1.0);
        let (a, b) = (encode(&f).unwrap(), encode(&neg).unwrap());
        for i in 0..5 {
            assert_eq!(hamming(a.code(i), b.code(i)).unwrap(), 70);
        }
        assert!(encode(&Matrix::from_rows(&[vec![f64::NAN]]).unwrap()).is_err());
    }

    #[test]
    fn hamming_examples() {
        let c = codes_from_signs(&[vec![1.0, -1.0, 1.0, 1.0], vec![1.0, 1.0, -1.0, 1.0]]);
        assert_eq!(hamming(c.code(0), c.code(1)).unwrap(), 2);
        assert_eq!(hamming(c.code(0), c.code(0)).unwrap(), 0);
        let full = codes_from_signs(&[vec![1.0; 64], vec![-1.0; 64]]);
        assert_eq!(hamming(full.code(0), full.code(1)).unwrap(), 64);
        assert!(hamming(&[0, 0], &[0]).is_err());
    }

    #[test]
    fn pad_bits_must_be_zero() {
        assert!(HashCodeSet::from_words(1, 3, vec![0b1000]).is_err());
        assert!(HashCodeSet::from_words(1, 3, vec![0b111]).is_ok());
    }

    #[test]
    fn average_precision_examples() {
        // (1/2)·(1/1 + 2/3), equal to 5/6 up to the last bit of rounding.
        let ap = average_precision(&[0, 1, 2], &[true, false, true]);
        assert!((ap - 5.0 / 6.0).abs() <= f64::EPSILON, "{ap}");
        assert_eq!(average_precision(&[2, 0, 1], &[true, false, true]), 1.0);
        assert_eq!(average_precision(&[0, 1], &[false, false]), 0.0);
    }

    #[test]
    fn precision_clamps_k() {
        assert_eq!(precision_at_k(&[0, 1, 2], &[true, false, true], 200), 2.0 / 3.0);
        assert_eq!(precision_at_k(&[0, 1, 2], &[true, false, true], 1), 1.0);
    }

    #[test]
    fn ranking_tie_rules() {
        let db = codes_from_signs(&[vec![1.0, -1.0], vec![1.0, 1.0], vec![-1.0, -1.0], vec![1.0, 1.0]]);
        let q = codes_from_signs(&[vec![1.0, 1.0]]);
        assert_eq!(rank_database(q.code(0), &db).unwrap(), vec![1, 3, 0, 2]);
        let flat = codes_from_signs(&vec![vec![1.0, -1.0]; 5]);
        assert_eq!(rank_database(q.code(0), &flat).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ranking_matches_naive_sort() {
        let mut g = rng::seeded(9);
        for _ in 0..20 {
            let r = g.random_range(1..=100);
            let db = encode(&Matrix::from_fn(100, r, |_, _| rng::normal(&mut g, 1.0))).unwrap();
            let q = encode(&Matrix::from_fn(1, r, |_, _| rng::normal(&mut g, 1.0))).unwrap();
            let mut naive: Vec<usize> = (0..100).collect();
            naive.sort_by_key(|&j| (hamming(q.code(0), db.code(j)).unwrap(), j));
            assert_eq!(rank_database(q.code(0), &db).unwrap(), naive);
        }
    }

    #[test]
    fn unique_labels_self_retrieval_is_perfect() {
        let mut g = rng::seeded(1);
        let f = Matrix::from_fn(16, 32, |_, _| rng::normal(&mut g, 1.0));
        let codes = encode(&f).unwrap();
        let y = LabelMatrix::multiclass(16, &(0..16).collect::<Vec<_>>()).unwrap();
        let rep = evaluate(&codes, &codes, &y, &y, &[1, 5], Direction::OneToTwo).unwrap();
        assert_eq!(rep.map, 1.0);
        assert_eq!(rep.precision_at_k[0], (1, 1.0));
    }

    #[test]
    fn random_codes_score_the_class_prior() {
        let mut g = rng::seeded(2);
        let classes: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        let yq = LabelMatrix::multiclass(2, &classes[..200]).unwrap();
        let ydb = LabelMatrix::multiclass(2, &classes).unwrap();
        let q = encode(&Matrix::from_fn(200, 32, |_, _| rng::normal(&mut g, 1.0))).unwrap();
        let db = encode(&Matrix::from_fn(2000, 32, |_, _| rng::normal(&mut g, 1.0))).unwrap();
        let rep = evaluate(&q, &db, &yq, &ydb, &[100], Direction::TwoToOne).unwrap();
        assert!((rep.map - 0.5).abs() <= 0.05, "map {}", rep.map);
    }

    #[test]
    fn evaluate_rejects_mismatches() {
        let y = LabelMatrix::multiclass(2, &[0, 1]).unwrap();
        let a = codes_from_signs(&[vec![1.0; 3], vec![-1.0; 3]]);
        let b = codes_from_signs(&[vec![1.0; 4], vec![-1.0; 4]]);
        assert!(evaluate(&a, &b, &y, &y, &[1], Direction::OneToTwo).is_err());
        let empty = HashCodeSet::from_words(0, 3, vec![]).unwrap();
        let y0 = LabelMatrix::multiclass(2, &[0]).unwrap();
        assert!(evaluate(&empty, &a, &y0, &y, &[1], Direction::OneToTwo).is_err());
    }

    #[test]
    fn map_invariant_to_database_permutation_with_distinct_distances() {
        // Query at distance 0..=4 from the five database codes.
        let base = [1.0; 4];
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|d| {
                base.iter()
                    .enumerate()
                    .map(|(k, v)| if k < d { -v } else { *v })
                    .collect()
            })
            .collect();
        let y = LabelMatrix::multiclass(2, &[0, 1, 0, 1, 1]).unwrap();
        let yq = LabelMatrix::multiclass(2, &[0]).unwrap();
        let q = codes_from_signs(&[base.to_vec()]);
        let a = evaluate(&q, &codes_from_signs(&rows), &yq, &y, &[2], Direction::OneToTwo).unwrap();
        let perm = [3, 0, 4, 2, 1];
        let rows_p: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let y_p = LabelMatrix::multiclass(2, &perm.iter().map(|&p| y.labels(p)[0]).collect::<Vec<_>>()).unwrap();
        let b = evaluate(&q, &codes_from_signs(&rows_p), &yq, &y_p, &[2], Direction::OneToTwo).unwrap();
        assert_eq!(a.map, b.map);
    }

    #[test]
    fn eval_csv_has_precision_columns() {
        let rep = EvalReport {
            direction: Direction::OneToTwo,
            map: 0.5,
            precision_at_k: vec![(200, 0.25)],
            ap: vec![0.5],
        };
        let mut buf = Vec::new();
        write_eval_csv(&[rep], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "direction,map,precision@200");
    }

    fn arb_code(r: usize) -> impl Strategy<Value = Vec<bool>> {
        proptest::collection::vec(any::<bool>(), r)
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric_and_half_l1(
            (a, b, c) in (1usize..150).prop_flat_map(|r| (arb_code(r), arb_code(r), arb_code(r)))
        ) {
            let to_rows = |v: &Vec<bool>| v.iter().map(|&x| if x { 1.0 } else { -1.0 }).collect::<Vec<f64>>();
            let set = codes_from_signs(&[to_rows(&a), to_rows(&b), to_rows(&c)]);
            let d = |i: usize, j: usize| hamming(set.code(i), set.code(j)).unwrap();
            prop_assert_eq!(d(0, 1), d(1, 0));
            prop_assert_eq!(d(0, 0), 0);
            prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2));
            let l1: f64 = to_rows(&a).iter().zip(to_rows(&b)).map(|(x, y)| (x - y).abs()).sum();
            prop_assert_eq!(f64::from(d(0, 1)), l1 / 2.0);
        }
    }
}
