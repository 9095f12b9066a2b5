use rekvc::evalkit::{
    codebook_stats, corpus_checksum, generate_corpus, speaker_similarity_proxy, write_corpus,
    SyntheticCorpusSpec,
};
use rekvc::format::read_features;
use rekvc::kmeans::{fit, KMeansConfig};
use rekvc::teacher::read_manifest;
use rekvc::FeatureMatrix;

const DEFAULT_CORPUS_SHA256: &str =
    "25097c5f2cc423ababa776174e8586d86252c07919922e212d862ffdf2ee44bb";

#[test]
fn default_corpus_checksum_is_pinned() {
    let corpus = generate_corpus(&SyntheticCorpusSpec::default()).unwrap();
    assert_eq!(corpus.len(), 4);
    assert!(corpus
        .iter()
        .all(|(_, m)| m.frames() == 500 && m.dim() == 16));
    assert_eq!(corpus_checksum(&corpus), DEFAULT_CORPUS_SHA256);
}

#[test]
fn written_corpus_matches_memory() {
    let spec = SyntheticCorpusSpec {
        frames_per_speaker: 40,
        seed: 11,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), &corpus).unwrap();
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), corpus.len());
    for (e, (spk, m)) in entries.iter().zip(&corpus) {
        assert_eq!(&e.speaker, spk);
        assert!(read_features(&e.path).unwrap().bit_eq(m));
    }
}

#[test]
fn codebook_stats_match_a_histogram_oracle() {
    let spec = SyntheticCorpusSpec {
        frames_per_speaker: 120,
        seed: 5,
        ..SyntheticCorpusSpec::default()
    };
    let corpus: Vec<FeatureMatrix> = generate_corpus(&spec)
        .unwrap()
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let all = FeatureMatrix::concat(&corpus.iter().collect::<Vec<_>>()).unwrap();
    let cb = fit(&all, 12, &KMeansConfig::with_seed(3)).unwrap();
    let stats = codebook_stats(&cb, &corpus).unwrap();

    // brute-force nearest centroid, first index on ties
    let mut hist = vec![0u64; cb.len()];
    for row in all.rows() {
        let mut best = (0, f64::INFINITY);
        for i in 0..cb.len() {
            let d: f64 = row
                .iter()
                .zip(cb.centroid(i))
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        hist[best.0] += 1;
    }
    assert_eq!(stats.counts, hist);
    let n = all.frames() as f64;
    let used = hist.iter().filter(|&&c| c > 0).count() as f64;
    assert_eq!(stats.utilization, used / cb.len() as f64);
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| -(c as f64 / n) * (c as f64 / n).ln())
        .sum();
    assert!((stats.perplexity - h.exp()).abs() < 1e-12);
    assert!(stats.perplexity >= 1.0 && stats.perplexity <= cb.len() as f64 + 1e-12);
}

#[test]
fn proxy_separates_speakers() {
    let corpus = generate_corpus(&SyntheticCorpusSpec::default()).unwrap();
    for (i, (_, a)) in corpus.iter().enumerate() {
        assert!((speaker_similarity_proxy(a, a).unwrap() - 1.0).abs() < 1e-12);
        for (j, (_, b)) in corpus.iter().enumerate() {
            let s = speaker_similarity_proxy(a, b).unwrap();
            assert_eq!(s, speaker_similarity_proxy(b, a).unwrap());
            if i != j {
                assert!(s < 0.99, "speakers {i} and {j}: {s}");
            }
        }
    }
}
