use dogma_core::grid::{
    read_dogma_sequence, read_sequence, sequence_to_frames, write_dogma_sequence, write_sequence,
    GridSequence, RawFrame, DOGMA_CHANNELS,
};
use dogma_core::{ds_combine, occupancy_probability, DogmaCell, DogmaFrame, GridGeometry, Masses, Pose};
use proptest::prelude::*;

fn masses() -> impl Strategy<Value = Masses> {
    (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(o, share)| Masses::new(o, (1.0 - o) * share))
}

fn cells() -> impl Strategy<Value = DogmaCell> {
    (0.0..=1.0f32, 0.0..=1.0f32, -20.0..20.0f32, -20.0..20.0f32, 0.0..16.0f32, 0.0..16.0f32, -1.0..=1.0f32)
        .prop_map(|(o, share, ve, vn, a, b, rho)| DogmaCell {
            m_occ: o,
            m_free: (1.0 - o) * share,
            v_east: ve,
            v_north: vn,
            var_v_east: a,
            var_v_north: b,
            cov_v: rho * (a * b).sqrt() * 0.999,
        })
}

fn frames() -> impl Strategy<Value = Vec<DogmaFrame>> {
    (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(w, h, t)| {
        prop::collection::vec((prop::collection::vec(cells(), w * h), -1e3..1e3f64, -1e3..1e3f64, -4.0..4.0f64), t)
            .prop_map(move |fs| {
                let g = GridGeometry::new(w, h, 0.15, -1.0, 2.0).unwrap();
                fs.into_iter()
                    .enumerate()
                    .map(|(i, (c, e, n, hd))| DogmaFrame::new(g, c, i as f64 * 0.1, Pose::new(e, n, hd)).unwrap())
                    .collect()
            })
    })
}

fn close(a: Masses, b: Masses) -> bool {
    (a.occ - b.occ).abs() <= 1e-12 && (a.free - b.free).abs() <= 1e-12
}

fn bits(frames: &[DogmaFrame]) -> Vec<u64> {
    frames
        .iter()
        .flat_map(|f| {
            let p = f.ego_pose();
            let head = [f.timestamp(), p.east, p.north, p.heading].map(f64::to_bits);
            head.into_iter().chain(f.cells().iter().flat_map(|c| c.channels().map(|v| u64::from(v.to_bits()))))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn occupancy_probability_bounds_and_monotonicity(c in cells(), d_occ in 0.0..1.0f32, d_free in 0.0..1.0f32) {
        let p = occupancy_probability(&c);
        prop_assert!((0.0..=1.0).contains(&p));
        let headroom = 1.0 - c.m_occ - c.m_free;
        let more_occ = DogmaCell { m_occ: c.m_occ + d_occ * headroom, ..c };
        let more_free = DogmaCell { m_free: c.m_free + d_free * headroom, ..c };
        prop_assert!(occupancy_probability(&more_occ) >= p);
        prop_assert!(occupancy_probability(&more_free) <= p);
    }

    #[test]
    fn dempster_rule_is_commutative_with_identity(a in masses(), b in masses()) {
        prop_assume!(a.occ * b.free + a.free * b.occ < 1.0 - 1e-6);
        prop_assert!(close(ds_combine(a, b).unwrap(), ds_combine(b, a).unwrap()));
        prop_assert!(close(ds_combine(a, Masses::VACUOUS).unwrap(), a));
    }

    #[test]
    fn dempster_rule_is_associative(a in masses(), b in masses(), c in masses()) {
        // Keep conflicts moderate so renormalization does not amplify round-off.
        prop_assume!(a.occ * b.free + a.free * b.occ < 0.9);
        prop_assume!(b.occ * c.free + b.free * c.occ < 0.9);
        let (Ok(ab), Ok(bc)) = (ds_combine(a, b), ds_combine(b, c)) else { return Ok(()) };
        let (Ok(l), Ok(r)) = (ds_combine(ab, c), ds_combine(a, bc)) else { return Ok(()) };
        prop_assert!(close(l, r), "{l:?} vs {r:?}");
    }

    #[test]
    fn file_round_trip_is_bit_exact(fs in frames()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.dgm");
        write_dogma_sequence(&fs, &path).unwrap();
        let back = read_dogma_sequence(&path).unwrap();
        prop_assert_eq!(bits(&back), bits(&fs));
        prop_assert_eq!(back, fs);
    }
}

#[test]
fn hundred_frames_of_301_square_round_trip_with_exact_size() {
    let g = GridGeometry::centered(301, 0.15).unwrap();
    let n = g.cell_count() * DOGMA_CHANNELS;
    let frames: Vec<RawFrame> = (0..100)
        .map(|t| RawFrame {
            timestamp: t as f64 * 0.1,
            ego_pose: Pose::new(t as f64, 0.0, 0.0),
            data: (0..n).map(|i| ((i * 7 + t) % 1000) as f32 / 1000.0).collect(),
        })
        .collect();
    let seq = GridSequence::new(g, DOGMA_CHANNELS, frames).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.dgm");
    write_sequence(&seq, &path).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, 48 + 100 * (32 + 301 * 301 * 7 * 4));
    let back = read_sequence(&path).unwrap();
    assert!(back == seq);
    assert_eq!(sequence_to_frames(&back).unwrap().len(), 100);
}

#[test]
fn wrong_magic_is_rejected() {
    let g = GridGeometry::centered(2, 1.0).unwrap();
    let frame = DogmaFrame::unknown(g, 0.0, Pose::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dgm");
    write_dogma_sequence(&[frame], &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        read_dogma_sequence(&path),
        Err(dogma_core::grid::GridError::MalformedHeader(_))
    ));
}
