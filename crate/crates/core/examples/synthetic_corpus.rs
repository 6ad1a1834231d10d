//! Generates the nine default silos, prints their sizes and rank-frequency
//! slopes, and shows how well a unigram classifier tells them apart.

use fedsilo::data::{self, UnigramClassifier};
use fedsilo::RunConfig;

fn slope(freqs: &[usize], top: usize) -> f64 {
    let pts: Vec<(f64, f64)> = freqs
        .iter()
        .take(top)
        .enumerate()
        .filter(|(_, &f)| f > 0)
        .map(|(r, &f)| (((r + 1) as f64).ln(), (f as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    cov / var
}

fn main() -> fedsilo::Result<()> {
    let cfg = RunConfig::default();
    let silos = cfg.load_silos()?;
    for s in &silos {
        let freqs = data::rank_frequencies(s.train.iter().flatten());
        println!(
            "silo {}: {:>6} train / {:>5} test sequences, {} distinct tokens, slope {:.2}",
            s.silo_id,
            s.n_samples(),
            s.test.len(),
            freqs.iter().filter(|&&f| f > 0).count(),
            slope(&freqs, 20)
        );
    }

    let classes: Vec<(u32, &[Vec<u32>])> = silos
        .iter()
        .map(|s| (s.silo_id, s.train.as_slice()))
        .collect();
    let clf = UnigramClassifier::fit(cfg.model.vocab_size, &classes);
    let (mut right, mut total) = (0, 0);
    for s in &silos {
        for seq in &s.test {
            right += usize::from(clf.predict(seq) == s.silo_id);
            total += 1;
        }
    }
    println!(
        "unigram classifier accuracy on test sequences: {:.4}",
        right as f64 / total as f64
    );
    Ok(())
}
