fn main() {
    use pta::config::ModelConfig;
    use pta::model::PtaModel;
    let cfg = ModelConfig { d_word: 8, d_model: 8, n_heads: 2, d_ff: 16, d_feat: 6, grid_cols: 2, ..ModelConfig::desk() };
    let model = PtaModel::new(cfg, 99).unwrap();
    let path = std::path::Path::new("/tmp/dbg.ckpt.json");
    pta::checkpoint::save_checkpoint(&model, vec![], path).unwrap();
    let (loaded, _) = pta::checkpoint::load_checkpoint(path).unwrap();
    for id in model.store.ids() {
        let a = model.store.value(id);
        let b = loaded.store.value(id);
        for i in 0..a.len() {
            if a[i] != b[i] {
                println!("param {} idx {}: {:?} vs {:?}", model.store.name(id), i, a[i], b[i]);
                println!("bits: {:x} vs {:x}", a[i].to_bits(), b[i].to_bits());
                return;
            }
        }
    }
    println!("all equal");
}
