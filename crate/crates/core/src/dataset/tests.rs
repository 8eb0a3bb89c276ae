use super::*;

fn front_scene(objects: Vec<ToyObject>, size: usize) -> ToySceneParams {
    ToySceneParams {
        objects,
        light: normalize([0.3, 0.8, 0.5]),
        intrinsics: CameraIntrinsics::default(),
        camera: CameraPose {
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            distance: 1.5,
        },
        image_size: size,
        ground_y: -0.3,
    }
}

fn sphere_at(tx: f64, tz: f64, scale: f64) -> ToyObject {
    ToyObject {
        primitive: Primitive::Sphere,
        albedo: [0.8, 0.3, 0.2],
        pose: Pose {
            scale,
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            translation: [tx, 0.0, tz],
        },
    }
}

#[test]
fn empty_scene_is_flat() {
    let mut p = front_scene(vec![], 24);
    p.camera.elevation_deg = 10.0;
    let r = render_toy(&p);
    assert!(r.object_mask.iter().all(|&m| m == 0));
    assert!(r.shadow_mask.iter().all(|&s| !s));
    let mut colours: Vec<&[u8]> = r.rgb.chunks(3).collect();
    colours.sort();
    colours.dedup();
    assert_eq!(colours.len(), 2, "ground and sky only");
}

#[test]
fn centred_sphere_silhouette_is_symmetric() {
    let obj = sphere_at(0.0, 0.0, 0.6);
    let mut p = front_scene(vec![obj.clone()], 33);
    p.ground_y = -obj.extent();
    assert_eq!(obj.center(p.ground_y), [0.0, 0.0, 0.0]);
    let r = render_toy(&p);
    let s = p.image_size;
    let m = |row: usize, col: usize| r.object_mask[row * s + col];
    let mut hits = 0;
    for row in 0..s {
        for col in 0..s {
            assert_eq!(m(row, col), m(row, s - 1 - col));
            assert_eq!(m(row, col), m(s - 1 - row, col));
            assert_eq!(m(row, col), m(col, row));
            hits += (m(row, col) > 0) as usize;
        }
    }
    assert!(hits > 50);
}

#[test]
fn sphere_hit_distance_matches_geometric_solution() {
    let objects = vec![sphere_at(0.1, -0.2, 0.6), sphere_at(-0.3, 0.25, 0.5)];
    let mut p = front_scene(objects, 48);
    p.camera.elevation_deg = 25.0;
    p.camera.azimuth_deg = 20.0;
    let r = render_toy(&p);
    let hits: Vec<usize> = (0..r.object_mask.len()).filter(|&i| r.object_mask[i] > 0).collect();
    assert!(hits.len() >= 20);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let i = hits[rng.random_range(0..hits.len())];
        let obj = &p.objects[r.object_mask[i] as usize - 1];
        let (o, d) = primary_ray(&p, i / p.image_size, i % p.image_size);
        let c = obj.center(p.ground_y);
        let l = sub(c, o);
        let tca = dot(l, d);
        let d2 = dot(l, l) - tca * tca;
        let thc = (obj.extent() * obj.extent() - d2).sqrt();
        let t = tca - thc;
        assert!((r.depth[i] - t).abs() < 1e-9, "{} vs {t}", r.depth[i]);
    }
}

#[test]
fn box_front_face_distance() {
    let mut b = sphere_at(0.0, 0.0, 0.5);
    b.primitive = Primitive::Box;
    let mut p = front_scene(vec![b.clone()], 31);
    p.ground_y = -b.extent();
    let r = render_toy(&p);
    let mid = 15 * 31 + 15;
    assert_eq!(r.object_mask[mid], 1);
    assert!((r.depth[mid] - (1.5 - b.extent())).abs() < 1e-12);
}

#[test]
fn dataset_files_are_reproducible() {
    let cfg = ToyDatasetConfig {
        count: 6,
        image_size: 16,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = make_dataset(&cfg, 11, a.path()).unwrap();
    let mb = make_dataset(&cfg, 11, b.path()).unwrap();
    assert_eq!(ma, mb);
    for f in &ma.files {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    let back: DatasetManifest = serde_json::from_slice(&fs::read(a.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(back, ma);
    let other = make_dataset(&cfg, 12, b.path()).unwrap();
    assert_ne!(other.scenes, ma.scenes);
}

#[test]
fn imbalanced_azimuths_avoid_gaps() {
    let cfg = ToyDatasetConfig {
        pose: PoseRanges::toy().imbalanced(),
        ..Default::default()
    };
    let mut hist = [0usize; 12];
    for i in 0..2000 {
        let az = toy_scene(&cfg, 3, i).objects[0].pose.azimuth_deg;
        hist[(az / 30.0) as usize] += 1;
        let d = (0..4).map(|k| ((az - 90.0 * k as f64 + 180.0).rem_euclid(360.0) - 180.0).abs());
        assert!(d.fold(f64::INFINITY, f64::min) <= 15.0 + 1e-9, "azimuth {az}");
    }
    // 30-degree bins alternate between a sector edge and a forbidden gap.
    for (k, &c) in hist.iter().enumerate() {
        if k % 3 == 1 {
            assert_eq!(c, 0, "bin {k}");
        } else {
            assert!(c > 0, "bin {k}");
        }
    }
}

#[test]
fn multi_object_scenes_have_one_silhouette_per_object() {
    let cfg = ToyDatasetConfig {
        num_objects: 3,
        image_size: 64,
        primitive: PrimitiveChoice::Mixed,
        pose: PoseRanges {
            scale: Interval::new(0.3, 0.4),
            ..PoseRanges::toy()
        },
        ..Default::default()
    };
    for i in 0..12 {
        let scene = toy_scene(&cfg, 5, i);
        assert_eq!(scene.objects.len(), 3);
        let r = render_toy(&scene);
        let s = r.size;
        assert_eq!(connected_components(s, |j| r.object_mask[j] > 0), 3, "scene {i}");
        for k in 1..=3u16 {
            assert_eq!(connected_components(s, |j| r.object_mask[j] == k), 1, "scene {i} object {k}");
        }
    }
}

#[test]
fn shadows_fall_away_from_light() {
    for light_az in [60.0f64, 110.0, 180.0, 250.0, 300.0] {
        let mut p = front_scene(vec![sphere_at(0.05, 0.0, 0.5)], 64);
        p.camera.elevation_deg = 45.0;
        let (e, a) = (40f64.to_radians(), light_az.to_radians());
        p.light = [e.cos() * a.sin(), e.sin(), e.cos() * a.cos()];
        let r = render_toy(&p);
        let shadow: Vec<usize> = (0..r.shadow_mask.len()).filter(|&i| r.shadow_mask[i]).collect();
        assert!(shadow.len() > 5, "azimuth {light_az}");
        let n = shadow.len() as f64;
        let cx = shadow.iter().map(|&i| r.hit[i][0]).sum::<f64>() / n;
        let cz = shadow.iter().map(|&i| r.hit[i][2]).sum::<f64>() / n;
        let c = p.objects[0].center(p.ground_y);
        let side = (cx - c[0]) * p.light[0] + (cz - c[2]) * p.light[2];
        assert!(side < 0.0, "azimuth {light_az}: {side}");
        // Shadowed ground is darker than lit ground.
        let lit = (0..r.shadow_mask.len()).find(|&i| r.object_mask[i] == 0 && !r.shadow_mask[i] && r.depth[i].is_finite());
        assert!(r.rgb[3 * shadow[0]] < r.rgb[3 * lit.unwrap()]);
    }
}

#[test]
fn silhouette_centroid_tracks_translation() {
    let mut last = f64::NEG_INFINITY;
    for k in 0..5 {
        let tx = -0.4 + 0.2 * k as f64;
        let mut p = front_scene(vec![sphere_at(tx, 0.1, 0.5)], 32);
        p.camera.elevation_deg = 45.0;
        let r = render_toy(&p);
        let cols: Vec<f64> = (0..r.object_mask.len())
            .filter(|&i| r.object_mask[i] > 0)
            .map(|i| (i % r.size) as f64)
            .collect();
        let c = cols.iter().sum::<f64>() / cols.len() as f64;
        assert!(c > last, "t_x {tx}");
        last = c;
    }
}

#[test]
fn scaling_arithmetic() {
    assert_eq!(scaled_dims(128, 96, 64), (85, 64));
    assert_eq!(scaled_dims(96, 128, 64), (64, 85));
    assert_eq!(scaled_dims(64, 64, 64), (64, 64));
}

#[test]
fn load_dir_scales_crops_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let square = RgbImage::from_fn(64, 64, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
    square.save(dir.path().join("a.png")).unwrap();
    RgbImage::from_fn(128, 96, |x, _| image::Rgb([(x * 2) as u8, 0, 0]))
        .save(dir.path().join("b.png"))
        .unwrap();
    RgbImage::new(40, 40).save(dir.path().join("c.png")).unwrap();
    fs::write(dir.path().join("d.png"), b"not an image").unwrap();
    fs::write(dir.path().join(MANIFEST_FILE), b"{}").unwrap();

    let set = ImageSet::load_dir(dir.path(), 64, false).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.skipped, 2);
    let a = set.get(0, &mut rng);
    assert_eq!(a.shape(), &[64, 64, 3]);
    let want: Vec<f32> = square.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
    assert_eq!(a.data(), &want[..]);
    assert_eq!(set.images[1].shape(), &[64, 85, 3]);
    assert_eq!(set.get(1, &mut rng).shape(), &[64, 64, 3]);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));

    let cropped = ImageSet::load_dir(dir.path(), 64, true).unwrap();
    let offsets: std::collections::BTreeSet<u32> = (0..40)
        .map(|_| {
            let c = cropped.get(1, &mut rng);
            c.data()[0].to_bits()
        })
        .collect();
    assert!(offsets.len() > 1, "random crop moves the window");
    assert_eq!(cropped.all().unwrap().shape(), &[2, 64, 64, 3]);
}

#[test]
fn epoch_order_is_a_shuffled_permutation() {
    let a = epoch_order(50, 1, 0);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_ne!(a, epoch_order(50, 1, 1));
    assert_eq!(a, epoch_order(50, 1, 0));
}

#[test]
fn grid_tiles_images() {
    let b = Tensor::new(&[3, 2, 2, 3], (0..36).map(|v| v as f32 / 36.0).collect()).unwrap();
    let g = image_grid(&b).unwrap();
    assert_eq!(g.shape(), &[4, 4, 3]);
    assert_eq!(&g.data()[0..6], &b.data()[0..6]);
    assert_eq!(&g.data()[6..12], &b.data()[12..18]);
    assert!(g.data()[(2 * 4 + 2) * 3..].iter().take(6).all(|&v| v == -1.0));
}

