use mapnet::gradcheck::{check_block, Block, TOLERANCE};

#[test]
fn every_block_matches_finite_differences() {
    for b in Block::ALL {
        let r = check_block(b, 7).unwrap();
        println!("{:<10} max rel error {:.3e} over {} coordinates", b, r.max_rel_error, r.checked);
        assert!(r.checked > 0);
        assert!(r.max_rel_error < TOLERANCE, "{b}: {}", r.max_rel_error);
    }
}

#[test]
fn other_seeds_also_pass() {
    for seed in [1, 2] {
        for b in [Block::Matcher, Block::Alignment, Block::Full] {
            let r = check_block(b, seed).unwrap();
            assert!(r.max_rel_error < TOLERANCE, "{b} seed {seed}: {}", r.max_rel_error);
        }
    }
}
