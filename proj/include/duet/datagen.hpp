#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/image.hpp"
#include "duet/rng.hpp"
#include "duet/tokenizer.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// vocabulary of the generated world
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& shape_class_names() {
    static const std::vector<std::string> names = {
        "circle", "square", "triangle", "diamond", "ring",     "plus", "bar",   "pole",
        "corner", "tee",    "hexagon",  "star",    "crescent", "frame", "wedge", "cross"};
    return names;
}

struct ColorEntry {
    const char* name;
    uint8_t r, g, b;
};

inline const std::vector<ColorEntry>& color_table() {
    static const std::vector<ColorEntry> colors = {
        {"red", 229, 38, 38},    {"green", 36, 200, 46},  {"blue", 48, 88, 231},
        {"yellow", 232, 221, 36}, {"cyan", 41, 212, 212},  {"magenta", 214, 41, 214},
        {"orange", 240, 144, 22}, {"white", 241, 241, 241}};
    return colors;
}

// Nonsense tokens standing in for unrelated web-caption noise.
inline const std::vector<std::string>& distractor_tokens() {
    static const std::vector<std::string> words = {
        "zorp",   "blick",  "quand",  "fribble", "snarf",  "glomp",  "trup",   "wizzle",
        "crang",  "plonk",  "dribbet", "vexel",  "murkle", "splam",  "chuff",  "grindle",
        "yumbo",  "kraff",  "twizz",  "blorp",   "snick",  "flem",   "gorp",   "zibble",
        "quorf",  "trindle", "wump",  "skree",   "plazz",  "droob",  "fenk",   "jarble"};
    return words;
}

// ---------------------------------------------------------------------------
// scene model
// ---------------------------------------------------------------------------

struct PlacedShape {
    int class_id = 0;
    int color_id = 0;
    double cx = 0, cy = 0, radius = 0;
    int layer = 0; // 0 = front-most
    int64_t area = 0; // full-mask pixel count, occlusion ignored
};

struct Scene {
    std::vector<PlacedShape> shapes; // indexed by layer (front first)
    int salient_index = 0;
};

// Analytic inside test for each shape class; (dx, dy) relative to the center.
inline bool shape_inside(int class_id, double dx, double dy, double r) {
    const double ax = std::fabs(dx), ay = std::fabs(dy);
    const double rr = dx * dx + dy * dy;
    switch (class_id) {
        case 0: return rr <= r * r;                                    // circle
        case 1: return ax <= 0.9 * r && ay <= 0.9 * r;                 // square
        case 2: return dy <= 0.75 * r && ax <= (dy + r) * 0.55;        // triangle
        case 3: return ax + ay <= r;                                   // diamond
        case 4: return rr <= r * r && rr >= 0.3 * r * r;               // ring
        case 5: return (ax <= 0.33 * r && ay <= r) || (ay <= 0.33 * r && ax <= r); // plus
        case 6: return ay <= 0.35 * r && ax <= r;                      // bar
        case 7: return ax <= 0.35 * r && ay <= r;                      // pole
        case 8: return ax <= r && ay <= r && (dx <= -0.3 * r || dy >= 0.3 * r); // corner
        case 9: return (ax <= r && dy >= -r && dy <= -0.4 * r) || (ax <= 0.3 * r && ay <= r); // tee
        case 10: return ay <= 0.866 * r && 0.866 * ax + 0.5 * ay <= 0.866 * r; // hexagon
        case 11: {                                                     // star
            const double u = std::pow(ax / r, 2.0 / 3.0) + std::pow(ay / r, 2.0 / 3.0);
            return u <= 1.0;
        }
        case 12:                                                       // crescent
            return rr <= r * r && (dx - 0.5 * r) * (dx - 0.5 * r) + dy * dy >= 0.5625 * r * r;
        case 13: {                                                     // frame
            const double m = std::max(ax, ay);
            return m <= 0.9 * r && m >= 0.5 * r;
        }
        case 14: return dy >= -0.75 * r && ax <= (r - dy) * 0.55;      // wedge
        case 15: return std::fabs(ax - ay) <= 0.3 * r && std::max(ax, ay) <= r; // cross
        default: fail("datagen: unknown shape class ", class_id);
    }
}

inline int64_t shape_area(const PlacedShape& s) {
    int64_t count = 0;
    const int lo_x = int(std::floor(s.cx - s.radius)), hi_x = int(std::ceil(s.cx + s.radius));
    const int lo_y = int(std::floor(s.cy - s.radius)), hi_y = int(std::ceil(s.cy + s.radius));
    for (int y = lo_y; y <= hi_y; ++y)
        for (int x = lo_x; x <= hi_x; ++x)
            if (shape_inside(s.class_id, x + 0.5 - s.cx, y + 0.5 - s.cy, s.radius)) ++count;
    return count;
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

struct GenConfig {
    int64_t count = 10000;
    int classes = 16;
    int side = 64;
    uint64_t seed = 0;
    int64_t eval_count = 256; // trailing records become the held-out split
    std::string out_dir;
};

struct DatasetRecord {
    int64_t id = 0;
    std::string image_path, seg_path, depth_path; // relative to the dataset dir
    std::string noisy, synthetic;
    int class_id = 0;
    std::string split;
    std::vector<PlacedShape> shapes; // generator ground truth
};

namespace detail {

inline Scene sample_scene(const GenConfig& cfg, Rng& rng) {
    Scene scene;
    const int n = 2 + int(rng.uniform_index(3)); // 2..4 shapes
    std::vector<int> class_pool(size_t(cfg.classes));
    for (int i = 0; i < cfg.classes; ++i) class_pool[size_t(i)] = i;
    rng.shuffle(class_pool);
    std::vector<int> color_pool(color_table().size());
    for (size_t i = 0; i < color_pool.size(); ++i) color_pool[i] = int(i);
    rng.shuffle(color_pool);

    for (int i = 0; i < n; ++i) {
        PlacedShape s;
        s.class_id = class_pool[size_t(i)];
        s.color_id = color_pool[size_t(i)];
        s.layer = i;
        s.radius = rng.uniform(0.14, 0.23) * cfg.side;
        const double margin = s.radius + 1.0;
        s.cx = rng.uniform(margin, cfg.side - margin);
        s.cy = rng.uniform(margin, cfg.side - margin);
        s.area = shape_area(s);
        scene.shapes.push_back(s);
    }
    int salient = 0;
    for (int i = 1; i < n; ++i)
        if (scene.shapes[size_t(i)].area > scene.shapes[size_t(salient)].area) salient = i;
    scene.salient_index = salient;
    return scene;
}

struct Rendered {
    Image rgb;
    Image seg;                // gray, 0 = background, class_id + 1 otherwise
    std::vector<float> depth; // 0 = nearest layer, 1 = background
};

inline Rendered render_scene(const Scene& scene, const GenConfig& cfg, Rng& rng) {
    Rendered out;
    out.rgb = Image::make(cfg.side, cfg.side, 3);
    out.seg = Image::make(cfg.side, cfg.side, 1);
    out.depth.assign(size_t(cfg.side) * size_t(cfg.side), 1.0f);
    const int n = int(scene.shapes.size());
    for (int y = 0; y < cfg.side; ++y)
        for (int x = 0; x < cfg.side; ++x) {
            uint8_t* px = out.rgb.at(x, y);
            const int noise = int(rng.uniform_index(13)) - 6;
            px[0] = uint8_t(std::clamp(28 + noise, 0, 255));
            px[1] = uint8_t(std::clamp(28 + noise, 0, 255));
            px[2] = uint8_t(std::clamp(34 + noise, 0, 255));
        }
    // painter's order: farthest layer first
    for (int layer = n - 1; layer >= 0; --layer) {
        const PlacedShape& s = scene.shapes[size_t(layer)];
        const ColorEntry& col = color_table()[size_t(s.color_id)];
        const float depth_value = float(layer) / float(n);
        const int lo_x = std::max(0, int(std::floor(s.cx - s.radius)));
        const int hi_x = std::min(cfg.side - 1, int(std::ceil(s.cx + s.radius)));
        const int lo_y = std::max(0, int(std::floor(s.cy - s.radius)));
        const int hi_y = std::min(cfg.side - 1, int(std::ceil(s.cy + s.radius)));
        for (int y = lo_y; y <= hi_y; ++y)
            for (int x = lo_x; x <= hi_x; ++x) {
                if (!shape_inside(s.class_id, x + 0.5 - s.cx, y + 0.5 - s.cy, s.radius))
                    continue;
                uint8_t* px = out.rgb.at(x, y);
                px[0] = col.r;
                px[1] = col.g;
                px[2] = col.b;
                *out.seg.at(x, y) = uint8_t(s.class_id + 1);
                out.depth[size_t(y) * cfg.side + x] = depth_value;
            }
    }
    return out;
}

inline std::string shape_phrase(const PlacedShape& s) {
    return std::string("a ") + color_table()[size_t(s.color_id)].name + " " +
           shape_class_names()[size_t(s.class_id)];
}

// Relation between consecutive shapes in the caption's enumeration order.
// Horizontal/vertical relations need a clear centroid margin; otherwise the
// layering decides (earlier layer = nearer).
inline std::string relation_between(const PlacedShape& a, const PlacedShape& b) {
    const double dx = a.cx - b.cx, dy = a.cy - b.cy;
    const double margin = 3.0;
    if (std::fabs(dx) >= std::fabs(dy) && std::fabs(dx) > margin)
        return dx < 0 ? "left of" : "right of";
    if (std::fabs(dy) > margin) return dy < 0 ? "above" : "below";
    return a.layer < b.layer ? "in front of" : "behind";
}

inline std::string synthetic_caption(const Scene& scene, Rng& rng) {
    std::vector<int> order(scene.shapes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    rng.shuffle(order);
    std::string caption;
    for (size_t i = 0; i < order.size(); ++i) {
        if (i) {
            caption += " " + relation_between(scene.shapes[size_t(order[i - 1])],
                                              scene.shapes[size_t(order[i])]) + " ";
        }
        caption += shape_phrase(scene.shapes[size_t(order[i])]);
    }
    return caption;
}

inline std::string noisy_caption(const Scene& scene, Rng& rng) {
    const PlacedShape& s = scene.shapes[size_t(scene.salient_index)];
    std::string caption = std::string(color_table()[size_t(s.color_id)].name) + " " +
                          shape_class_names()[size_t(s.class_id)];
    const int extras = int(rng.uniform_index(3)); // 0..2 distractor tokens
    std::vector<int> picks;
    for (int i = 0; i < extras; ++i) {
        int pick;
        do {
            pick = int(rng.uniform_index(distractor_tokens().size()));
        } while (std::find(picks.begin(), picks.end(), pick) != picks.end());
        picks.push_back(pick);
        caption += " " + distractor_tokens()[size_t(pick)];
    }
    return caption;
}

inline std::string zero_pad(int64_t v, int width) {
    std::string s = std::to_string(v);
    while (int(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

} // namespace detail

inline nlohmann::json record_to_json(const DatasetRecord& rec) {
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& s : rec.shapes)
        shapes.push_back({{"class_id", s.class_id},
                          {"color_id", s.color_id},
                          {"cx", s.cx},
                          {"cy", s.cy},
                          {"radius", s.radius},
                          {"layer", s.layer},
                          {"area", s.area}});
    return nlohmann::json{{"id", rec.id},
                          {"image", rec.image_path},
                          {"seg", rec.seg_path},
                          {"depth", rec.depth_path},
                          {"noisy", rec.noisy},
                          {"synthetic", rec.synthetic},
                          {"class_id", rec.class_id},
                          {"split", rec.split},
                          {"shapes", shapes}};
}

inline DatasetRecord record_from_json(const nlohmann::json& j) {
    DatasetRecord rec;
    rec.id = j.at("id").get<int64_t>();
    rec.image_path = j.at("image").get<std::string>();
    rec.seg_path = j.at("seg").get<std::string>();
    rec.depth_path = j.at("depth").get<std::string>();
    rec.noisy = j.at("noisy").get<std::string>();
    rec.synthetic = j.at("synthetic").get<std::string>();
    rec.class_id = j.at("class_id").get<int>();
    rec.split = j.at("split").get<std::string>();
    for (const auto& s : j.at("shapes")) {
        PlacedShape ps;
        ps.class_id = s.at("class_id").get<int>();
        ps.color_id = s.at("color_id").get<int>();
        ps.cx = s.at("cx").get<double>();
        ps.cy = s.at("cy").get<double>();
        ps.radius = s.at("radius").get<double>();
        ps.layer = s.at("layer").get<int>();
        ps.area = s.at("area").get<int64_t>();
        rec.shapes.push_back(ps);
    }
    return rec;
}

// Writes images, dense label maps and the index file. Deterministic for a
// given seed, byte for byte.
inline void generate_corpus(const GenConfig& cfg) {
    DUET_CHECK(cfg.count >= 1, "datagen: count must be at least 1");
    DUET_CHECK(cfg.classes >= 1 && cfg.classes <= int(shape_class_names().size()),
               "datagen: classes must lie in [1, ", shape_class_names().size(), "], got ",
               cfg.classes);
    DUET_CHECK(cfg.side >= 16, "datagen: canvas side ", cfg.side, " too small");
    DUET_CHECK(cfg.eval_count >= 0 && cfg.eval_count < cfg.count,
               "datagen: eval split of ", cfg.eval_count, " needs count above it");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(cfg.out_dir) / "images", ec);
    fs::create_directories(fs::path(cfg.out_dir) / "labels", ec);
    DUET_CHECK(fs::is_directory(cfg.out_dir), "datagen: cannot create output directory ",
               cfg.out_dir);

    std::ofstream index(fs::path(cfg.out_dir) / "index.jsonl", std::ios::binary);
    DUET_CHECK(index.good(), "datagen: cannot write index in ", cfg.out_dir);

    Rng master(cfg.seed);
    for (int64_t id = 0; id < cfg.count; ++id) {
        Rng rng = master.fork(uint64_t(id));
        const Scene scene = detail::sample_scene(cfg, rng);
        const auto rendered = detail::render_scene(scene, cfg, rng);

        DatasetRecord rec;
        rec.id = id;
        const std::string stem = detail::zero_pad(id, 6);
        rec.image_path = "images/" + stem + ".png";
        rec.seg_path = "labels/" + stem + "_seg.png";
        rec.depth_path = "labels/" + stem + "_depth.f32";
        rec.noisy = detail::noisy_caption(scene, rng);
        rec.synthetic = detail::synthetic_caption(scene, rng);
        rec.class_id = scene.shapes[size_t(scene.salient_index)].class_id;
        rec.split = id >= cfg.count - cfg.eval_count ? "eval" : "train";
        rec.shapes = scene.shapes;

        write_png((fs::path(cfg.out_dir) / rec.image_path).string(), rendered.rgb);
        write_png((fs::path(cfg.out_dir) / rec.seg_path).string(), rendered.seg);
        write_float_map((fs::path(cfg.out_dir) / rec.depth_path).string(), cfg.side, cfg.side,
                        rendered.depth);
        index << record_to_json(rec).dump() << "\n";
    }
    index.close();
    DUET_CHECK(index.good(), "datagen: short write to index in ", cfg.out_dir);

    nlohmann::json meta{{"format_version", 1},
                        {"count", cfg.count},
                        {"classes", cfg.classes},
                        {"side", cfg.side},
                        {"seed", cfg.seed},
                        {"eval_count", cfg.eval_count}};
    std::ofstream meta_out(fs::path(cfg.out_dir) / "meta.json", std::ios::binary);
    meta_out << meta.dump(2) << "\n";
}

struct DatasetMeta {
    int64_t count = 0;
    int classes = 0;
    int side = 0;
    uint64_t seed = 0;
    int64_t eval_count = 0;
};

inline DatasetMeta load_meta(const std::string& dir) {
    std::ifstream in(std::filesystem::path(dir) / "meta.json");
    DUET_CHECK(in.good(), "dataset: missing meta.json in ", dir);
    nlohmann::json j = nlohmann::json::parse(in);
    DatasetMeta m;
    m.count = j.at("count").get<int64_t>();
    m.classes = j.at("classes").get<int>();
    m.side = j.at("side").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    m.eval_count = j.at("eval_count").get<int64_t>();
    return m;
}

// Yields records in index order; an empty split keeps everything.
inline std::vector<DatasetRecord> load_dataset(const std::string& dir,
                                               const std::string& split = "") {
    std::ifstream in(std::filesystem::path(dir) / "index.jsonl", std::ios::binary);
    DUET_CHECK(in.good(), "dataset: missing index.jsonl in ", dir);
    std::vector<DatasetRecord> records;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        DUET_CHECK(!j.is_discarded(), "dataset: malformed record at line ", line_no, " of ",
                   dir, "/index.jsonl");
        DatasetRecord rec;
        try {
            rec = record_from_json(j);
        } catch (const std::exception& e) {
            fail("dataset: invalid record at line ", line_no, ": ", e.what());
        }
        DUET_CHECK(rec.class_id >= 0, "dataset: negative class id at line ", line_no);
        DUET_CHECK(!rec.noisy.empty() && !rec.synthetic.empty(),
                   "dataset: empty caption at line ", line_no);
        DUET_CHECK(rec.split == "train" || rec.split == "eval",
                   "dataset: unknown split tag '", rec.split, "' at line ", line_no);
        if (split.empty() || rec.split == split) records.push_back(std::move(rec));
    }
    return records;
}

struct LoadedExample {
    DatasetRecord meta;
    Image image;              // RGB
    Image seg;                // gray
    std::vector<float> depth; // side * side
};

inline LoadedExample load_example(const std::string& dir, const DatasetRecord& rec,
                                  bool with_labels = true) {
    namespace fs = std::filesystem;
    LoadedExample ex;
    ex.meta = rec;
    ex.image = read_png((fs::path(dir) / rec.image_path).string());
    DUET_CHECK(ex.image.channels == 3, "dataset: image ", rec.image_path, " is not RGB");
    if (with_labels) {
        ex.seg = read_png((fs::path(dir) / rec.seg_path).string());
        DUET_CHECK(ex.seg.width == ex.image.width && ex.seg.height == ex.image.height,
                   "dataset: segmentation dims mismatch for ", rec.seg_path);
        int dh = 0, dw = 0;
        ex.depth = read_float_map((fs::path(dir) / rec.depth_path).string(), &dh, &dw);
        DUET_CHECK(dh == ex.image.height && dw == ex.image.width,
                   "dataset: depth dims mismatch for ", rec.depth_path);
    }
    return ex;
}

// ---------------------------------------------------------------------------
// caption pairing modes
// ---------------------------------------------------------------------------

enum class CaptionMode { dual, sampled, multi_text };

inline CaptionMode caption_mode_from(const std::string& name) {
    if (name == "dual") return CaptionMode::dual;
    if (name == "sampled") return CaptionMode::sampled;
    if (name == "multi-text" || name == "multi_text") return CaptionMode::multi_text;
    fail("datagen: unknown caption mode '", name, "'");
}

inline const char* caption_mode_name(CaptionMode m) {
    switch (m) {
        case CaptionMode::dual: return "dual";
        case CaptionMode::sampled: return "sampled";
        default: return "multi-text";
    }
}

// Which caption pairs with which class token. caption 0 = noisy, 1 =
// synthetic; token 0 = the noisy-stream class token, 1 = the synthetic one.
struct CaptionPairing {
    CaptionMode mode = CaptionMode::dual;
    struct Assignment {
        int caption;
        int token;
    };
    std::vector<Assignment> assignments;
    bool second_token_active() const { return mode == CaptionMode::dual; }
};

inline CaptionPairing pair_captions(const DatasetRecord& rec, CaptionMode mode, Rng& rng) {
    DUET_CHECK(!rec.noisy.empty() && !rec.synthetic.empty(),
               "pair_captions: both captions must be present");
    CaptionPairing p;
    p.mode = mode;
    switch (mode) {
        case CaptionMode::dual:
            p.assignments = {{0, 0}, {1, 1}};
            break;
        case CaptionMode::sampled:
            p.assignments = {{rng.bernoulli(0.5) ? 1 : 0, 0}};
            break;
        case CaptionMode::multi_text:
            p.assignments = {{0, 0}, {1, 0}};
            break;
    }
    return p;
}

} // namespace duet
