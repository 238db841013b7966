use nalgebra::Vector3;

use super::JOINT_COUNT;

/// Weak-perspective camera: `(x, y) = scale · (X, Y) + translation`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakPerspectiveCam {
    /// Pixels per meter; must be positive.
    pub scale: f64,
    pub translation: [f64; 2],
}

pub fn project_weak_perspective(joints: &[Vector3<f64>; JOINT_COUNT], cam: &WeakPerspectiveCam) -> [[f64; 2]; JOINT_COUNT] {
    debug_assert!(cam.scale > 0.0);
    std::array::from_fn(|j| {
        [cam.scale * joints[j].x + cam.translation[0], cam.scale * joints[j].y + cam.translation[1]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose() -> [Vector3<f64>; JOINT_COUNT] {
        std::array::from_fn(|j| Vector3::new(0.1 * j as f64 - 1.0, 0.05 * j as f64, 3.0 - j as f64))
    }

    #[test]
    fn unit_orthographic_drops_depth() {
        let cam = WeakPerspectiveCam { scale: 1.0, translation: [0.0, 0.0] };
        let p = pose();
        let px = project_weak_perspective(&p, &cam);
        for j in 0..JOINT_COUNT {
            assert_eq!(px[j], [p[j].x, p[j].y]);
        }
    }

    #[test]
    fn doubling_scale_doubles_centered_coordinates() {
        let p = pose();
        let a = project_weak_perspective(&p, &WeakPerspectiveCam { scale: 3.0, translation: [5.0, -2.0] });
        let b = project_weak_perspective(&p, &WeakPerspectiveCam { scale: 6.0, translation: [5.0, -2.0] });
        for j in 0..JOINT_COUNT {
            assert!((2.0 * (a[j][0] - 5.0) - (b[j][0] - 5.0)).abs() < 1e-12);
            assert!((2.0 * (a[j][1] + 2.0) - (b[j][1] + 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_pixels() {
        let mut p = [Vector3::zeros(); JOINT_COUNT];
        p[0] = Vector3::new(0.0, 0.9, 0.0);
        p[15] = Vector3::new(0.1, 1.6, 0.2);
        p[21] = Vector3::new(-0.7, 1.3, 0.0);
        let cam = WeakPerspectiveCam { scale: 10.0, translation: [16.0, 4.0] };
        let px = project_weak_perspective(&p, &cam);
        assert_eq!(px[0], [16.0, 13.0]);
        assert_eq!(px[15], [17.0, 20.0]);
        assert_eq!(px[21], [9.0, 17.0]);
        assert_eq!(px[3], [16.0, 4.0]);
    }
}
