#![no_main]

use libfuzzer_sys::fuzz_target;
use mvgs::sceneio::{parse_checkpoint, write_checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = parse_checkpoint(data) else { return };
    // Anything accepted must survive a write/parse cycle unchanged.
    let mut first = Vec::new();
    write_checkpoint(&mut first, &ck).unwrap();
    let again = parse_checkpoint(&first).expect("re-parse of a written checkpoint");
    let mut second = Vec::new();
    write_checkpoint(&mut second, &again).unwrap();
    assert_eq!(first, second);
});
