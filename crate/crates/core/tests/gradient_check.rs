//! Analytic refinement gradients against central finite differences.

mod common;

use symptom_fv::regression::{loss_and_gradient, stack_loss, ParamGroup, RefineSample};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

#[test]
fn every_parameter_group_matches_finite_differences() {
    let mut checked = 0;
    for seed in 0..200 {
        if checked == 10 {
            break;
        }
        let inst = common::gradient_instance(seed, 3, 4, 20, 2, 3);
        if common::min_abs_fv_entry(&inst) < 0.05 {
            continue;
        }
        checked += 1;
        let samples: Vec<RefineSample> = inst
            .frames
            .iter()
            .zip(&inst.targets)
            .zip(&inst.ids)
            .map(|((f, t), id)| RefineSample {
                id,
                frames: f.view(),
                targets: t,
            })
            .collect();
        let (_, grad) = loss_and_gradient(&inst.stack, &samples).unwrap();
        let base = inst.stack.to_flat();
        let layout = inst.stack.layout();
        let mut worst = (0.0f64, ParamGroup::Means, 0usize, 0.0, 0.0);
        for (group, range) in layout.groups() {
            for i in range {
                let mut probe = inst.stack.clone();
                let mut p = base.clone();
                p[i] = base[i] + STEP;
                probe.set_flat(&p).unwrap();
                let up = stack_loss(&probe, &samples).unwrap();
                p[i] = base[i] - STEP;
                probe.set_flat(&p).unwrap();
                let down = stack_loss(&probe, &samples).unwrap();
                let fd = (up - down) / (2.0 * STEP);
                let err = relative_error(grad[i], fd);
                if err > worst.0 {
                    worst = (err, group, i, grad[i], fd);
                }
            }
        }
        println!("seed {seed}: worst {worst:?}");
        assert!(worst.0 <= TOL, "seed {seed}: {worst:?}");
    }
    assert_eq!(checked, 10, "not enough well-conditioned instances");
}
