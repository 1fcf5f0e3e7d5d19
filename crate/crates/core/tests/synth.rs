use std::fs;
use std::path::Path;

use physio_recon::dataset::{load_manifest, load_scan, PrepSettings};
use physio_recon::synth::{
    band_limited_noise, generate_dataset, synthesize, LinearOracle, SynthConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_subjects: 6,
        n_roi: 8,
        len: 120,
        seed,
        ..SynthConfig::default()
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small(3), a.path()).unwrap();
    generate_dataset(&small(3), b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 1 + 1 + 6 * 3);
    assert!(ta == tb);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small(4), c.path()).unwrap();
    assert!(read_tree(c.path()) != ta);
}

#[test]
fn latent_power_sits_in_band() {
    let dt = 1.44;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for len in [200, 271, 500] {
        let x = band_limited_noise(&mut rng, len, dt, [0.01, 0.15]);
        // Direct DFT periodogram, independent of the FFT used to build it.
        let (mut inside, mut total) = (0.0, 0.0);
        for k in 1..len / 2 + 1 {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let ph = std::f64::consts::TAU * (k * t) as f64 / len as f64;
                re += v * ph.cos();
                im -= v * ph.sin();
            }
            let p = re * re + im * im;
            let f = k as f64 / (len as f64 * dt);
            total += p;
            if (0.01..=0.15).contains(&f) {
                inside += p;
            }
        }
        assert!(inside / total >= 0.95, "len {len}: {}", inside / total);
    }
}

#[test]
fn generated_datasets_load_in_both_modes() {
    for raw_mode in [false, true] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_subjects: 3,
            scans_per_subject: 2,
            raw_mode,
            ..small(1)
        };
        generate_dataset(&cfg, dir.path()).unwrap();
        let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.scans.len(), 6);
        assert_eq!(m.scans[0].resp_path.is_some(), raw_mode);
        for entry in &m.scans {
            let scan = load_scan(entry, &m, &PrepSettings::default()).unwrap();
            assert_eq!(scan.len(), 120, "raw_mode {raw_mode}");
            assert_eq!(scan.n_roi(), 8);
        }
        let ages: Vec<f64> = m.scans.iter().map(|s| s.age).collect();
        assert!(ages.iter().all(|a| (36.0..=89.0).contains(a)));
        assert_eq!(ages[0], ages[1], "scans of one subject share the age");
    }
}

#[test]
fn raw_mode_targets_track_latents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_subjects: 2,
        len: 271,
        raw_mode: true,
        ..small(5)
    };
    let (_, latent) = synthesize(&cfg).unwrap();
    generate_dataset(&cfg, dir.path()).unwrap();
    let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
    for (entry, lat) in m.scans.iter().zip(&latent) {
        let scan = load_scan(entry, &m, &PrepSettings::default()).unwrap();
        let rv_lat: Vec<f64> = lat.rv.iter().step_by(2).copied().collect();
        let hr_lat: Vec<f64> = lat.hr.iter().step_by(2).copied().collect();
        let n = scan.len().min(rv_lat.len());
        let r_rv = pearson(&scan.rv[..n], &rv_lat[..n]);
        let r_hr = pearson(&scan.hr[..n], &hr_lat[..n]);
        assert!(r_rv > 0.7 && r_hr > 0.7, "rv {r_rv}, hr {r_hr}");
    }
}

#[test]
fn latents_uncorrelated_on_average() {
    let cfg = SynthConfig {
        n_subjects: 40,
        n_roi: 2,
        len: 271,
        ..small(9)
    };
    let (_, scans) = synthesize(&cfg).unwrap();
    let mean_r = scans.iter().map(|s| pearson(&s.rv, &s.hr)).sum::<f64>() / scans.len() as f64;
    assert!(mean_r.abs() < 0.2, "{mean_r}");
}

fn in_sample_r(cfg: &SynthConfig) -> f64 {
    let (_, scans) = synthesize(cfg).unwrap();
    let oracle = LinearOracle::fit(
        scans.iter().map(|s| (&s.roi[..], &s.rv[..])),
        cfg.n_roi,
        cfg.lag_max,
        1e-8,
    )
    .unwrap();
    let pred: Vec<f64> = scans.iter().flat_map(|s| oracle.predict(&s.roi)).collect();
    let target: Vec<f64> = scans.iter().flat_map(|s| s.rv.iter().copied()).collect();
    pearson(&pred, &target)
}

#[test]
fn least_squares_floor_and_snr_monotonicity() {
    let base = SynthConfig {
        n_subjects: 20,
        n_roi: 32,
        len: 271,
        ..small(2)
    };
    let r10 = in_sample_r(&SynthConfig {
        snr: 10.0,
        ..base.clone()
    });
    assert!(r10 >= 0.9, "snr 10: {r10}");
    let levels: Vec<f64> = [0.2, 1.0, 10.0]
        .iter()
        .map(|&snr| {
            in_sample_r(&SynthConfig {
                snr,
                ..base.clone()
            })
        })
        .collect();
    assert!(levels[0] < levels[1] && levels[1] < levels[2], "{levels:?}");
}

#[test]
fn shared_encoding_seed_shares_gains() {
    let a = SynthConfig {
        encoding_seed: Some(77),
        ..small(1)
    };
    let b = SynthConfig {
        seed: 2,
        kernel_shift: 2,
        ..a.clone()
    };
    let (ea, _) = synthesize(&a).unwrap();
    let (eb, _) = synthesize(&b).unwrap();
    assert_eq!(ea.rv_gain, eb.rv_gain);
    assert_eq!(eb.rv_kernel[0][..2], [0.0, 0.0]);
    assert_eq!(ea.rv_kernel[0][..], eb.rv_kernel[0][2..]);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        SynthConfig {
            snr: 0.0,
            ..small(0)
        },
        SynthConfig {
            snr: -1.0,
            ..small(0)
        },
        SynthConfig {
            len: 19,
            ..small(0)
        },
        SynthConfig {
            n_roi: 0,
            ..small(0)
        },
        SynthConfig {
            age_range: [50.0, 40.0],
            ..small(0)
        },
    ] {
        assert!(synthesize(&cfg).is_err(), "{cfg:?}");
    }
}
