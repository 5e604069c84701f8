use dynasaur::env::{viability_oracle, viable_position_bound, SlopeCarParams, ViabilityGridSpec};

const GOLDEN: &str = include_str!("golden/slopecar_boundary.csv");

fn golden() -> Vec<(f64, f64)> {
    GOLDEN
        .lines()
        .skip(1)
        .map(|l| {
            let (v, p) = l.split_once(',').unwrap();
            (v.parse().unwrap(), p.parse().unwrap())
        })
        .collect()
}

#[test]
fn kernel_boundary_near_slope_entry_matches_golden() {
    let p = SlopeCarParams::default();
    let spec = ViabilityGridSpec::default();
    let grid = viability_oracle(&p, &spec).unwrap();
    let boundary = grid.boundary();
    let rows = golden();
    assert_eq!(rows.len(), 41);
    for (vel, want) in rows {
        let j = (0..spec.vel_cells)
            .min_by(|&a, &b| (spec.vel_at(a) - vel).abs().total_cmp(&(spec.vel_at(b) - vel).abs()))
            .unwrap();
        assert!((spec.vel_at(j) - vel).abs() < 1e-9);
        let got = boundary[j].expect("row has viable cells");
        assert!((got - want).abs() < 1e-9, "vel {vel}: boundary {got}, golden {want}");
    }
}

#[test]
fn golden_boundary_tracks_the_exact_braking_bound() {
    let p = SlopeCarParams::default();
    let spec = ViabilityGridSpec::default();
    for (vel, pos) in golden() {
        let exact = viable_position_bound(&p, vel, spec.horizon, spec.pos_range.0).unwrap();
        assert!(pos <= exact + 1e-9, "vel {vel}: grid boundary {pos} beyond exact {exact}");
        // nearest-cell snapping over the horizon costs a few cells
        assert!(exact - pos <= 4.0 * spec.pos_step(), "vel {vel}: grid boundary {pos}, exact {exact}");
    }
}

#[test]
fn boundary_recedes_as_velocity_toward_the_cliff_grows() {
    let rows = golden();
    for w in rows.windows(2) {
        assert!(w[1].1 <= w[0].1 + 1e-12);
    }
    let entry = SlopeCarParams::default().slope_start;
    assert!(rows.first().unwrap().1 > entry && rows.last().unwrap().1 < entry);
}
