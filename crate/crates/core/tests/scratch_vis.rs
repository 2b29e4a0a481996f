use tinyalign_core::dataset::read_dataset;

fn ascii(img: &tinyalign_core::scene::Image) -> String {
    let chars = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let mut out = String::new();
    for y in 0..img.height {
        for x in 0..img.width {
            let v = img.get(x, y).clamp(0.0, 0.999);
            out.push(chars[(v * 10.0) as usize]);
        }
        out.push('\n');
    }
    out
}

#[test]
fn dump_samples() {
    let ds = read_dataset(std::path::Path::new("/tmp/run1/dataset.tads")).unwrap();
    for idx in [0usize, 5] {
        let s = &ds.samples[idx];
        println!("=== sample {idx}: d_r = {:?} (norm {:.4})", s.d_r.as_slice(), s.d_r.norm());
        println!("--- head image:");
        println!("{}", ascii(&s.observation.head_image));
        println!("--- torso image:");
        println!("{}", ascii(&s.observation.torso_image));
    }
}
