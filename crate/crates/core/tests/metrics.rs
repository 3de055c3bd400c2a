mod common;

#[test]
fn fb_score_properties() {
    common::metric::check_fb_properties(2000).unwrap();
}
