use blockgan::model::{Latent, ModelConfig, BACKGROUND};
use blockgan_service::request::{CameraRequest, ObjectRequest, PoseRequest};
use blockgan_service::GenerateRequest;
use proptest::prelude::*;

fn request(fg: Vec<PoseRequest>, elevation_deg: f64) -> GenerateRequest {
    let mut objects = vec![ObjectRequest {
        category: BACKGROUND.into(),
        z: Latent::Seed(1),
        pose: PoseRequest::default(),
    }];
    objects.extend(fg.into_iter().enumerate().map(|(i, pose)| ObjectRequest {
        category: "sphere".into(),
        z: Latent::Seed(i as u64 + 2),
        pose,
    }));
    GenerateRequest {
        objects,
        camera: CameraRequest {
            elevation_deg,
            ..Default::default()
        },
        composer: None,
        output: Default::default(),
    }
}

fn pose() -> impl Strategy<Value = PoseRequest> {
    (-0.5f64..1.5, -720.0f64..720.0, prop::array::uniform3(-2.0f64..2.0)).prop_map(|(scale, azimuth_deg, t)| {
        PoseRequest {
            scale,
            azimuth_deg,
            tx: t[0],
            ty: t[1],
            tz: t[2],
        }
    })
}

fn in_range(p: &PoseRequest, extent: f64) -> bool {
    p.scale > 0.0 && p.scale <= 1.0 && [p.tx, p.ty, p.tz].iter().all(|t| t.abs() <= extent)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn validation_accepts_exactly_the_in_range_poses(
        poses in prop::collection::vec(pose(), 0..5),
        elevation in -120.0f64..120.0,
    ) {
        let cfg = ModelConfig::desk();
        let req = request(poses.clone(), elevation);
        let errors = req.validate(&cfg);
        let ok = poses.iter().all(|p| in_range(p, cfg.scene_extent)) && elevation.abs() <= 89.0;
        prop_assert_eq!(errors.is_empty(), ok, "{:?}", errors);
        for e in &errors {
            prop_assert!(e.field.starts_with("objects[") || e.field == "camera.elevation_deg", "{}", e.field);
        }
        if ok {
            prop_assert!(req.to_spec().to_batch(&cfg).is_ok());
        }
    }
}
