use crate::error::Result;
use crate::models::{evaluate_lm, LanguageModel, Token};
use serde::{Deserialize, Serialize};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str = "stage,model,domain,log_ppl,token_acc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: String,
    pub model: String,
    pub domain: String,
    pub log_ppl: f64,
    /// Percent.
    pub token_acc: f64,
}

/// One row per named test corpus.
pub fn evaluate_model<M: LanguageModel + ?Sized>(
    model: &M,
    stage: &str,
    name: &str,
    tests: &[(String, Vec<Token>)],
    seq_len: usize,
) -> Result<Vec<MetricRow>> {
    tests
        .iter()
        .map(|(domain, corpus)| {
            let e = evaluate_lm(model, corpus, seq_len)?;
            Ok(MetricRow {
                stage: stage.to_string(),
                model: name.to_string(),
                domain: domain.clone(),
                log_ppl: e.log_ppl,
                token_acc: e.token_acc,
            })
        })
        .collect()
}

/// Values use Rust's shortest round-trip float formatting, so equal
/// numbers always print identically.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage, r.model, r.domain, r.log_ppl, r.token_acc
        ));
    }
    s
}

/// Looks up one metric row.
pub fn find<'a>(rows: &'a [MetricRow], stage: &str, model: &str, domain: &str) -> Option<&'a MetricRow> {
    rows.iter()
        .find(|r| r.stage == stage && r.model == model && r.domain == domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DenseLm, LmConfig};
    use crate::rng::rng_from_seed;

    #[test]
    fn csv_schema_and_repeatability() {
        let m = DenseLm::init(LmConfig::family("tinyA", 8, 8).unwrap(), &mut rng_from_seed(0)).unwrap();
        let tests = vec![("mixed".to_string(), (0..40).map(|i| (i % 8) as Token).collect())];
        let a = evaluate_model(&m, "proxy", "proxy_0", &tests, 8).unwrap();
        let b = evaluate_model(&m, "proxy", "proxy_0", &tests, 8).unwrap();
        assert_eq!(a, b);
        let csv = metrics_csv(&a);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("stage,model,domain,log_ppl,token_acc"));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&fields[..3], ["proxy", "proxy_0", "mixed"]);
        assert_eq!(fields[3].parse::<f64>().unwrap(), a[0].log_ppl);
        assert!(find(&a, "proxy", "proxy_0", "mixed").is_some());
    }
}
