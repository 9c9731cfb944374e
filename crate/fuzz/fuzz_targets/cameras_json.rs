#![no_main]

use libfuzzer_sys::fuzz_target;
use mvgs::sceneio::parse_cameras;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok((file, cameras)) = parse_cameras(text) else {
        return;
    };
    assert_eq!(file.views.len(), cameras.len());
    let json = serde_json::to_string(&file).unwrap();
    let (again, _) = parse_cameras(&json).expect("re-parse of a serialized cameras file");
    assert_eq!(file, again);
});
