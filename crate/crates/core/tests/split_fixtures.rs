mod common;

use common::*;
use vsplit_core::dom::serialize_html;
use vsplit_core::mapping::GeometryTable;

#[test]
fn youtube_interactive_content_moves_to_the_slave() {
    let (annotated, result) = youtube();
    check_expected_ids(&annotated, &result, YOUTUBE_DEVICE2, YOUTUBE_DEVICE1, YOUTUBE_BOTH).unwrap();
    // The video and the comments stay visible on the master.
    let master = &result.master;
    for id in ["movie", "comments", "comment-2-text"] {
        let n = master.find_by_html_id(id).unwrap();
        assert_ne!(effective_device(master, &n), Some("device2"), "{id}");
    }
}

#[test]
fn semantic_video_region_moves_video_and_photos() {
    let (annotated, result) = semantic_video();
    check_expected_ids(&annotated, &result, VIDEO_DEVICE2, VIDEO_DEVICE1, VIDEO_BOTH).unwrap();
    let video = result.slave.find_by_html_id("main-video").unwrap();
    assert_eq!(result.slave.attr(&video, "src"), Some("https://popcorn.example/semantic-video/media/cycling.webm"));
}

#[test]
fn split_covers_the_original_on_every_fixture() {
    let (a, r) = youtube();
    check_coverage(&a, &r).unwrap();
    let (a, r) = semantic_video();
    check_coverage(&a, &r).unwrap();
}

#[test]
fn split_is_deterministic_with_a_fixed_session() {
    for run in [youtube, semantic_video] {
        let (_, first) = run();
        let (_, second) = run();
        assert_eq!(serialize_html(&first.master, true), serialize_html(&second.master, true));
        assert_eq!(serialize_html(&first.slave, true), serialize_html(&second.slave, true));
        assert_eq!(first.manifest, second.manifest);
    }
}

#[test]
fn region_without_matching_geometry_key_is_reported() {
    let doc = load("semantic-video.html", Some(VIDEO_BASE));
    let g: GeometryTable = serde_json::from_str(r##"{"#nope":{"x":0,"y":0,"w":1,"h":1}}"##).unwrap();
    assert!(g.resolve_html_ids(&doc).is_err());
}
