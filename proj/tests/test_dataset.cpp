#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "vql/dataset.hpp"
#include "vql/dataset_io.hpp"

using namespace vql;

namespace {

namespace fs = std::filesystem;

struct TmpDir {
    fs::path path;
    TmpDir() {
        path = fs::temp_directory_path() / ("vql_ds_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string dir(const std::string& name) const { return (path / name).string(); }
};

SyntheticConfig small_config(std::uint64_t seed) {
    SyntheticConfig cfg;
    cfg.n_users = 6;
    cfg.seq_len.avg = 40;
    cfg.n_clusters = 3;
    cfg.n_items = 30;
    cfg.noise = 0.1;
    cfg.samples_per_user = 4;
    cfg.feat_dim = 6;
    cfg.seed = seed;
    return cfg;
}

bool datasets_equal(const SyntheticDataset& a, const SyntheticDataset& b) {
    if (a.sequences.size() != b.sequences.size() || a.samples.size() != b.samples.size()) {
        return false;
    }
    for (std::size_t u = 0; u < a.sequences.size(); ++u) {
        if (!(a.sequences[u].item_ids == b.sequences[u].item_ids &&
              a.sequences[u].timestamps == b.sequences[u].timestamps &&
              a.sequences[u].key_feats == b.sequences[u].key_feats &&
              a.sequences[u].value_feats == b.sequences[u].value_feats)) {
            return false;
        }
    }
    for (std::size_t s = 0; s < a.samples.size(); ++s) {
        if (!(a.samples[s].user == b.samples[s].user &&
              a.samples[s].item_id == b.samples[s].item_id &&
              a.samples[s].query_time == b.samples[s].query_time &&
              a.samples[s].label == b.samples[s].label)) {
            return false;
        }
    }
    return a.items.key_feats == b.items.key_feats && a.items.value_feats == b.items.value_feats;
}

}  // namespace

TEST_CASE("default sequence-length target mirrors a production-scale log") {
    CHECK(SeqLenDist{}.avg == 4407);
}

TEST_CASE("generation is deterministic per seed and well-formed") {
    const SyntheticDataset a = generate_synthetic(small_config(7));
    const SyntheticDataset b = generate_synthetic(small_config(7));
    CHECK(datasets_equal(a, b));
    const SyntheticDataset c = generate_synthetic(small_config(8));
    CHECK_FALSE(datasets_equal(a, c));

    for (const EventSequence& seq : a.sequences) {
        CHECK_NOTHROW(seq.validate());
        // Lengths land in [avg/2, 3*avg/2].
        CHECK(seq.length() >= 20);
        CHECK(seq.length() <= 60);
    }
    int pos = 0;
    for (const DatasetSample& s : a.samples) pos += s.label;
    CHECK(pos > 0);
    CHECK(pos < static_cast<int>(a.samples.size()));
}

TEST_CASE("event keys copy their item's key features verbatim") {
    const SyntheticDataset ds = generate_synthetic(small_config(11));
    for (const EventSequence& seq : ds.sequences) {
        for (std::size_t i = 0; i < seq.length(); ++i) {
            const std::size_t item = ds.items.row_of(seq.item_ids[i]);
            for (std::size_t c = 0; c < ds.feat_dim; ++c) {
                CHECK(seq.key_feats(i, c) == ds.items.key_feats(item, c));
            }
        }
    }
}

TEST_CASE("noise=0 collapses every cluster onto its mean exactly") {
    SyntheticConfig cfg = small_config(13);
    cfg.noise = 0.0;
    const SyntheticDataset ds = generate_synthetic(cfg);
    for (std::size_t i = 0; i < ds.items.ids.size(); ++i) {
        for (std::size_t j = i + 1; j < ds.items.ids.size(); ++j) {
            if (ds.items.cluster[i] != ds.items.cluster[j]) continue;
            for (std::size_t c = 0; c < ds.feat_dim; ++c) {
                CHECK(ds.items.key_feats(i, c) == ds.items.key_feats(j, c));
            }
        }
    }
}

TEST_CASE("dataset round trips through text and binary event logs") {
    TmpDir tmp;
    const SyntheticDataset ds = generate_synthetic(small_config(17));
    for (bool binary : {false, true}) {
        const std::string dir = tmp.dir(binary ? "bin" : "txt");
        write_dataset(ds, dir, binary);
        const SyntheticDataset back = load_dataset(dir);
        CHECK(datasets_equal(ds, back));
    }
}

TEST_CASE("writing the same dataset twice produces identical bytes") {
    TmpDir tmp;
    const SyntheticDataset ds = generate_synthetic(small_config(19));
    write_dataset(ds, tmp.dir("a"), false);
    write_dataset(ds, tmp.dir("b"), false);
    for (const char* name : {"events.tsv", "items.tsv", "samples.tsv", "meta.json"}) {
        std::ifstream fa(tmp.dir("a") + "/" + name, std::ios::binary);
        std::ifstream fb(tmp.dir("b") + "/" + name, std::ios::binary);
        const std::string sa((std::istreambuf_iterator<char>(fa)), {});
        const std::string sb((std::istreambuf_iterator<char>(fb)), {});
        CHECK(sa == sb);
        CHECK(!sa.empty());
    }
}

TEST_CASE("malformed event logs fail with the malformed code") {
    TmpDir tmp;
    const SyntheticDataset ds = generate_synthetic(small_config(23));
    const std::string dir = tmp.dir("bad");
    write_dataset(ds, dir, false);

    auto corrupt = [&](const std::string& extra_line) {
        std::ofstream f(dir + "/events.tsv", std::ios::app);
        f << extra_line << "\n";
    };
    corrupt("0 1");  // too few fields
    try {
        (void)load_dataset(dir);
        FAIL("expected malformed");
    } catch (const io_error& e) {
        CHECK(e.code == io_code::malformed);
    }

    write_dataset(ds, dir, false);
    corrupt("0 1 100 not_a_number 0 0 0 0 0 0 0 0 0 0 0");
    try {
        (void)load_dataset(dir);
        FAIL("expected malformed");
    } catch (const io_error& e) {
        CHECK(e.code == io_code::malformed);
    }
}
