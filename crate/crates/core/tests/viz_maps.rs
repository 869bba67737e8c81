use dualcorr::model::{run_clip, ModelConfig, ModelParams};
use dualcorr::synthgen::{generate_sample, GenConfig};
use dualcorr::viz::{decode_pgm, normalize, sample_maps, write_sample_maps, RANGES_FILE};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot / n
    }
}

#[test]
fn word_maps_equal_brute_force_cosines() {
    let sample = generate_sample(6, &GenConfig::default()).unwrap();
    let params = ModelParams::init(&ModelConfig::default(), 2).unwrap();
    let out = run_clip(&params, &sample.clip, &sample.tokens).unwrap();
    let (h, w, maps) = sample_maps(&params, &sample).unwrap();
    assert_eq!((h, w), (out.grid.grid_h, out.grid.grid_w));
    let words = sample.tokens.len();
    assert_eq!(maps.len(), sample.clip.len() * (1 + words));
    for t in [0, 5, 11] {
        for s in 0..words {
            let (name, values) = &maps[t * (1 + words) + 1 + s];
            assert!(name.starts_with(&format!("sim_t{t:02}_w{s:02}_")), "{name}");
            assert_eq!(values.len(), h * w);
            for (p, v) in values.iter().enumerate() {
                let expect = cos(out.patches[t].row(p), out.words.row(s));
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn written_maps_match_their_ranges() {
    let sample = generate_sample(7, &GenConfig::default()).unwrap();
    let params = ModelParams::init(&ModelConfig::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let entries = write_sample_maps(&params, &sample, dir.path()).unwrap();
    let (_, _, maps) = sample_maps(&params, &sample).unwrap();
    let sidecar = std::fs::read_to_string(dir.path().join(RANGES_FILE)).unwrap();
    assert_eq!(sidecar.lines().count(), entries.len() + 1);
    for ((entry, (name, values)), line) in entries.iter().zip(&maps).zip(sidecar.lines().skip(1)) {
        let (h, w, px) = decode_pgm(&std::fs::read(&entry.path).unwrap()).unwrap();
        assert_eq!((h, w), (8, 8));
        let (expect, min, max) = normalize(values);
        assert_eq!(px, expect);
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields[0], name);
        assert_eq!(fields[1].parse::<f64>().unwrap(), min);
        assert_eq!(fields[2].parse::<f64>().unwrap(), max);
        assert_eq!((entry.min, entry.max), (min, max));
    }
}
