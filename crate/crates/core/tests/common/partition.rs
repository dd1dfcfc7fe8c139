//! Structural checks on superpixel partitions.

use xmd_core::superpixel::SuperpixelPartition;

/// Every pixel labelled, at most `k` segments, ids dense and each segment one
/// 4-connected component.
pub fn check_partition(p: &SuperpixelPartition, k: usize) {
    assert_eq!(p.labels.len(), p.height * p.width);
    assert!(p.segments >= 1 && p.segments <= k, "{} segments for K = {}", p.segments, k);
    let mut seen = vec![false; p.segments];
    for &l in &p.labels {
        assert!(l < p.segments);
        seen[l] = true;
    }
    assert!(seen.iter().all(|&s| s), "unused segment id");
    // every segment is one 4-connected component
    let mut comp = vec![usize::MAX; p.labels.len()];
    let mut components = 0;
    for start in 0..p.labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        comp[start] = start;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % p.width, i / p.width);
            let mut nb = Vec::with_capacity(4);
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < p.width {
                nb.push(i + 1);
            }
            if y > 0 {
                nb.push(i - p.width);
            }
            if y + 1 < p.height {
                nb.push(i + p.width);
            }
            for j in nb {
                if comp[j] == usize::MAX && p.labels[j] == p.labels[i] {
                    comp[j] = start;
                    stack.push(j);
                }
            }
        }
    }
    assert_eq!(components, p.segments, "a segment is split");
}
