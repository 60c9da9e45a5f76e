use fusedview::face_texture::{extract_texture, overlay_paste, rasterize_face, stitch, MeshFit, TextureAtlas};
use fusedview::metrics::masked_psnr;
use fusedview::synthetic::{SceneKind, SynthScene, SynthSpec};
use ndarray::{Array3, Zip};

fn setup() -> (SynthScene, MeshFit) {
    let scene = SynthScene::new(SynthSpec::new(SceneKind::Static, 12, 128, 3)).unwrap();
    let mut mesh = MeshFit {
        vertices: scene.head.vertices.clone(),
        faces: scene.face_faces.clone(),
        uv: scene.head.uv.clone(),
        views: vec![],
    };
    for (k, i) in [0, 6, 11].into_iter().enumerate() {
        let view = mesh.project_view(&format!("v{k}"), None, &scene.camera(i));
        mesh.views.push(view);
    }
    (scene, mesh)
}

#[test]
fn atlas_survives_render_extract_stitch() {
    let (scene, mesh) = setup();
    let cams: Vec<_> = [0, 6, 11].into_iter().map(|i| scene.camera(i)).collect();
    let renders: Vec<_> = cams
        .iter()
        .enumerate()
        .map(|(k, c)| rasterize_face(&mesh, Some(k), &scene.head_atlas, c).unwrap())
        .collect();
    let partials: Vec<TextureAtlas<f64>> = renders
        .iter()
        .enumerate()
        .map(|(k, r)| extract_texture(r.image.view(), &mesh, k, 128).unwrap().0)
        .collect();
    let atlas = stitch(&partials).unwrap();
    assert!(atlas.coverage() >= partials.iter().map(|p| p.coverage()).max().unwrap());
    let again = rasterize_face(&mesh, Some(1), &atlas, &cams[1]).unwrap();
    let mask = Zip::from(&renders[1].mask)
        .and(&again.mask)
        .map_collect(|&a, &b| a && b);
    assert!(mask.iter().filter(|&&m| m).count() > 1000);
    let p = masked_psnr(again.image.view(), renders[1].image.view(), mask.view()).unwrap();
    assert!(p > 25.0, "round trip PSNR {p}");
}

#[test]
fn paste_keeps_background_and_replaces_face() {
    let (scene, mesh) = setup();
    let cam = scene.camera(6);
    let face = rasterize_face(&mesh, Some(1), &scene.head_atlas, &cam).unwrap();
    let under = Array3::from_elem((128, 128, 3), 0.25);
    let pasted = overlay_paste(under.view(), &face).unwrap();
    for ((r, c), &m) in face.mask.indexed_iter() {
        for k in 0..3 {
            let want = if m { face.image[[r, c, k]] } else { 0.25 };
            assert_eq!(pasted[[r, c, k]], want);
        }
    }
}
