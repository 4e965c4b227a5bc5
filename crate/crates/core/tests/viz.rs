mod common;

use istpa::data::SalientBox;
use istpa::pyramid::FrameGrid;
use istpa::viz::{
    attention_mass_in_boxes, chance_ratio, column_to_position, emit_heatmaps,
    extract_salient_fields, receptive_center, render_frame, SalienceMode, SalienceReport,
};
use istpa::{Error, Tensor};
use proptest::prelude::*;

const GRID: FrameGrid = FrameGrid {
    frames: 3,
    width: 4,
    height: 4,
};

#[test]
fn column_positions_enumerate_frames_then_rows() {
    let mut expect = Vec::new();
    for k in 0..3 {
        for w in 0..4 {
            for h in 0..4 {
                expect.push((k, w, h));
            }
        }
    }
    let got: Vec<_> = (0..48)
        .map(|p| column_to_position(p, GRID).unwrap())
        .collect();
    assert_eq!(got, expect);
    assert_eq!(column_to_position(0, GRID).unwrap(), (0, 0, 0));
    assert_eq!(column_to_position(47, GRID).unwrap(), (2, 3, 3));
    assert!(matches!(
        column_to_position(48, GRID),
        Err(Error::Contract(_))
    ));
}

#[test]
fn uniform_attention_selects_everything() {
    let a = Tensor::full(&[16, 48], 1.0 / 48.0);
    let r = extract_salient_fields(&a, GRID, 0.5, SalienceMode::PerFrame).unwrap();
    assert_eq!(r.entries.len(), 48);
    assert!(r
        .entries
        .iter()
        .all(|e| e.slot() == 0 && e.rescaled() == 1.0));
    let r = extract_salient_fields(&a, GRID, 0.5, SalienceMode::PerPosition).unwrap();
    assert_eq!(r.entries.len(), 16 * 16);
    assert!(r.entries.iter().all(|e| e.frame() == 0));
}

#[test]
fn one_hot_attention_selects_one_position() {
    let mut a = Tensor::zeros(&[16, 48]);
    a.data_mut()[37] = 1.0;
    let r = extract_salient_fields(&a, GRID, 0.7, SalienceMode::PerFrame).unwrap();
    assert_eq!(r.entries.len(), 1);
    let e = r.entries[0];
    assert_eq!((e.frame(), e.position(), e.raw()), (2, (1, 1), 1.0));
}

#[test]
fn extraction_rejects_bad_inputs() {
    let a = Tensor::full(&[16, 48], 0.1);
    for t in [0.0, 1.0, -0.2, f64::NAN] {
        assert!(matches!(
            extract_salient_fields(&a, GRID, t, SalienceMode::PerFrame),
            Err(Error::Contract(_))
        ));
    }
    assert!(matches!(
        extract_salient_fields(&Tensor::zeros(&[16, 47]), GRID, 0.5, SalienceMode::PerFrame),
        Err(Error::Dimension { .. })
    ));
}

fn brute_force(a: &Tensor, threshold: f64) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for m in 0..16 {
        let row = a.row(m);
        let max = row.iter().cloned().fold(0.0, f64::max);
        for k in 0..1 {
            for w in 0..4 {
                for h in 0..4 {
                    let v = row[k * 16 + w * 4 + h];
                    if v / max > threshold {
                        out.push((m, k, w, h));
                    }
                }
            }
        }
    }
    out
}

#[test]
fn per_position_extraction_matches_brute_force() {
    let a = map(common::randn(&[16, 48], 12), f64::abs);
    for t in [0.1, 0.3, 0.5, 0.9] {
        let r = extract_salient_fields(&a, GRID, t, SalienceMode::PerPosition).unwrap();
        let got: Vec<_> = r.entries.iter().map(|e| (e.0, e.1, e.2, e.3)).collect();
        assert_eq!(got, brute_force(&a, t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn raising_threshold_never_adds_entries(
        values in prop::collection::vec(0.0f64..1.0, 48 * 16),
        lo in 0.01f64..0.98,
        gap in 0.0f64..0.5,
    ) {
        let a = Tensor::new(&[16, 48], values).unwrap();
        let hi = (lo + gap).min(0.99);
        for mode in [SalienceMode::PerFrame, SalienceMode::PerPosition] {
            let low = extract_salient_fields(&a, GRID, lo, mode).unwrap();
            let high = extract_salient_fields(&a, GRID, hi, mode).unwrap();
            prop_assert!(high.entries.iter().all(|e| low.entries.contains(e)));
        }
    }
}

fn map(t: Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
}

fn frames() -> Tensor {
    map(common::randn(&[3, 32, 32, 1], 5), |v| {
        0.4 + 0.1 * v.clamp(-1.0, 1.0)
    })
}

#[test]
fn empty_report_leaves_frames_alone() {
    let f = frames();
    let report = SalienceReport {
        threshold: 0.5,
        mode: SalienceMode::PerFrame,
        frames: 3,
        width: 4,
        height: 4,
        entries: Vec::new(),
    };
    for k in 0..3 {
        let px = render_frame(&report, &f, k, 8);
        let plain: Vec<u8> = f.data()[k * 1024..(k + 1) * 1024]
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        assert_eq!(px, plain);
    }
}

#[test]
fn one_entry_stamps_one_square() {
    let f = frames();
    let mut a = Tensor::zeros(&[16, 48]);
    a.data_mut()[16 + 2 * 4 + 3] = 1.0;
    let report = extract_salient_fields(&a, GRID, 0.5, SalienceMode::PerFrame).unwrap();
    let base = render_frame(
        &SalienceReport {
            entries: vec![],
            ..report.clone()
        },
        &f,
        1,
        8,
    );
    let px = render_frame(&report, &f, 1, 8);
    let (cw, ch) = receptive_center(2, 3, 8);
    assert_eq!((cw, ch), (20, 28));
    for r in 0..32usize {
        for c in 0..32usize {
            let i = r * 32 + c;
            if r.abs_diff(cw) <= 1 && c.abs_diff(ch) <= 1 {
                assert_eq!(px[i], 255);
            } else {
                assert_eq!(px[i], base[i]);
            }
        }
    }
    assert_eq!(
        render_frame(&report, &f, 0, 8),
        render_frame(&report, &f, 0, 8)
    );

    let dir = tempfile::tempdir().unwrap();
    let written = emit_heatmaps(&report, &f, 8, dir.path()).unwrap();
    assert_eq!(written.len(), 4);
    let pgm = std::fs::read(dir.path().join("frame_1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(&pgm[pgm.len() - 1024..], px.as_slice());
    let json = std::fs::read_to_string(dir.path().join("salience.json")).unwrap();
    assert_eq!(SalienceReport::from_json(&json).unwrap(), report);
}

#[test]
fn box_mass_oracles() {
    let grid = FrameGrid {
        frames: 2,
        width: 4,
        height: 4,
    };
    let boxes = [
        SalientBox {
            w0: 0,
            h0: 0,
            w1: 8,
            h1: 8,
        },
        SalientBox {
            w0: 4,
            h0: 4,
            w1: 12,
            h1: 12,
        },
    ];
    let uniform = Tensor::full(&[16, 32], 1.0);
    let chance = chance_ratio(&boxes, 32, 32);
    assert!((chance - 64.0 / 1024.0).abs() < 1e-15);
    let got = attention_mass_in_boxes(&uniform, grid, &boxes, 8).unwrap();
    assert!((got - chance).abs() < 1e-12);
    let mut hit = Tensor::zeros(&[16, 32]);
    for m in 0..16 {
        hit.data_mut()[m * 32] = 1.0;
    }
    assert!((attention_mass_in_boxes(&hit, grid, &boxes, 8).unwrap() - 1.0).abs() < 1e-15);
    assert!(attention_mass_in_boxes(&hit, grid, &boxes[..1], 8).is_err());
}
