use kintomo_web::{basis_curves, invert, travel_time_section};

#[test]
fn basis_rows_are_orthonormal_on_the_samples() {
    let s = 2001;
    let flat = basis_curves(3, s).unwrap();
    assert_eq!(flat.len(), 4 * s);
    let row = |k: usize| &flat[(k + 1) * s..(k + 2) * s];
    assert_eq!((flat[0], flat[s - 1]), (0.0, 1.0));
    // Composite Simpson on the uniform samples.
    let h = 1.0 / (s - 1) as f64;
    let simpson = |f: &dyn Fn(usize) -> f64| {
        (0..s).map(|i| f(i) * if i == 0 || i == s - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 }).sum::<f64>() * h / 3.0
    };
    for a in 0..3 {
        for b in 0..3 {
            let g = simpson(&|i| row(a)[i] * row(b)[i]);
            assert!((g - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10, "({a},{b}) {g}");
        }
    }
}

#[test]
fn travel_time_grows_with_depth_below_the_source() {
    let img = travel_time_section("freespace", 0.0, 0.5, 1).unwrap();
    let v = img.values();
    assert_eq!(v.len(), img.width() * img.height());
    let c = img.width() / 2;
    // Row 0 is the top of the slab, farthest from the source plane.
    for r in 1..img.height() {
        assert!(v[(r - 1) * img.width() + c] > v[r * img.width() + c]);
    }
    // m ≡ 1: the bottom row directly below the source sits at distance A = 1.
    assert!((v[(img.height() - 1) * img.width() + c] - 1.0).abs() < 1e-9);
}

#[test]
fn small_inversion_round_trip() {
    let r = invert("bump", 0.3, 2.0, 0.1, 200).unwrap();
    let (t, m) = (r.truth(), r.reconstruction());
    assert_eq!((t.width(), t.height()), (m.width(), m.height()));
    assert_eq!(r.objective().len(), 200);
    assert!(r.objective().last() < r.objective().first());
    assert!(r.rel_error().is_finite());

    let r = invert("bump", 0.3, 16.0, 0.1, 200).unwrap();
    assert!(r.objective().last() < r.objective().first());
    assert!(r.status() != "Diverged");
}
