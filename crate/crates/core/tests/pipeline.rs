use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use evopu::pipeline::{load_config, run_experiment, run_generate, run_sweep, run_train, PipelineError, SweepParameter};

const OBSERVED: &str =
    "sequence,count\nGCUGGU,500\nGCCGGU,120\nGCUGGC,40\nGCUGAU,8\nGUUGGU,30\nGAUGGU,12\nGCUGUU,9\nGGUGGU,5\nGCUGCU,3\n";
const TEST: &str = "aa_sequence,label,frequency\nVV,1,3\nDA,1,1\nVA,1,2\nWW,0,\nPP,0,\nMC,0,\n";

fn fixture(dir: &Path, extra: &str) -> std::path::PathBuf {
    fs::write(dir.join("observed.csv"), OBSERVED).unwrap();
    fs::write(dir.join("test.csv"), TEST).unwrap();
    let text = format!(
        "seed = 1\noutput_dir = \"out\"\n[data]\nobserved = \"observed.csv\"\ntest = \"test.csv\"\n\
         [evolution]\nhosts = 1e6\n[training]\nmax_epochs = 40\npatience = 10\n{extra}"
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn lambda_sweep_writes_one_record_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = load_config(&fixture(dir.path(), "")).unwrap();
    let values: Vec<String> = ["10", "50", "100"].iter().map(|s| s.to_string()).collect();
    let records = run_sweep(&loaded, SweepParameter::Lambda, &values).unwrap();
    assert_eq!(records.len(), 3);
    for (rec, v) in records.iter().zip(&values) {
        assert_eq!(rec.override_value, Some(("lambda".to_string(), v.clone())));
        assert_eq!(rec.resolved_config.training.lambda, v.parse::<f64>().unwrap());
    }
    let summary = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for i in 0..3 {
        assert!(dir.path().join(format!("out/lambda_{i}/metrics.csv")).exists());
    }
}

#[test]
fn empty_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = load_config(&fixture(dir.path(), "")).unwrap();
    assert!(matches!(
        run_sweep(&loaded, SweepParameter::Lambda, &[]),
        Err(PipelineError::InvalidSweepParameter(_))
    ));
    assert!(matches!("gamma".parse::<SweepParameter>(), Err(PipelineError::InvalidSweepParameter(_))));
}

#[test]
fn reported_counts_match_candidate_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(&fixture(dir.path(), "")).unwrap().config;
    let counts = run_generate(&cfg).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("out/candidates.csv")).unwrap();
    let mut nuc = BTreeSet::new();
    let mut observed_aa = BTreeSet::new();
    let mut aa = BTreeSet::new();
    let mut observed_nuc = 0;
    for row in rdr.records() {
        let row = row.unwrap();
        if &row[3] == "true" || &row[3] == "1" {
            observed_nuc += 1;
            observed_aa.insert(row[1].to_string());
        } else {
            nuc.insert(row[0].to_string());
            aa.insert(row[1].to_string());
        }
    }
    let aa: BTreeSet<String> = aa.difference(&observed_aa).cloned().collect();
    assert_eq!(counts.observed_nuc, observed_nuc);
    assert_eq!(counts.observed_aa, observed_aa.len());
    assert_eq!(counts.candidate_nuc, nuc.len());
    assert_eq!(counts.candidate_aa, aa.len());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/counts.json")).unwrap()).unwrap();
    assert_eq!(json["candidate_nuc"], counts.candidate_nuc);
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = load_config(&fixture(dir.path(), "")).unwrap();
    let rec = run_experiment(&loaded).unwrap();
    for f in ["candidates.csv", "model.json", "nuisance.csv", "trace.csv", "scores.csv", "metrics.csv", "run_record.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    assert!(rec.fitted_po.is_some() && rec.fitted_alpha.is_some());
    assert!(rec.metrics.spearman.is_some());
    assert_eq!(rec.config_text, fs::read_to_string(dir.path().join("run.toml")).unwrap());
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("method,classifier,seed,auc,ap,spearman\n"));
}

#[test]
fn baselines_run_end_to_end() {
    for method in ["classical", "proteinpu", "twostep", "knn"] {
        let dir = tempfile::tempdir().unwrap();
        let extra = format!("[model]\nmethod = \"{method}\"\n[baseline]\nfolds = 2\nunlabeled_alphabet = \"ADGV\"\n");
        let loaded = load_config(&fixture(dir.path(), &extra)).unwrap();
        let rec = run_experiment(&loaded).unwrap_or_else(|e| panic!("{method}: {e}"));
        assert_eq!(rec.metrics.method, method);
        assert!((0.0..=1.0).contains(&rec.metrics.auc));
    }
}

#[test]
fn knn_has_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "[model]\nmethod = \"knn\"\n[baseline]\nfolds = 2\n";
    let cfg = load_config(&fixture(dir.path(), extra)).unwrap().config;
    assert!(run_train(&cfg).is_err());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path(), "[model]\nflavour = \"x\"\n");
    assert!(matches!(load_config(&path), Err(PipelineError::Config(_))));
}
