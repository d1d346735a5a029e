#pragma once

// Procedural toy re-identification data.
//
// Each identity is a vertically banded figure (head / torso / legs) whose
// band colors come from a small shared palette, so identities differ mainly
// in *where* each color sits. Cameras apply a global color transform, every
// sample gets a detection-style corruption (vertical shift, vertical scale,
// occlusion) scaled by one severity knob, then sensor noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "pyreid/batching.hpp"
#include "pyreid/container.hpp"
#include "pyreid/rng.hpp"

namespace pyreid {

enum class Split { train, query, gallery };

inline std::string_view split_name(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
    }
    return "?";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "query") return Split::query;
    if (s == "gallery") return Split::gallery;
    throw FormatError("unknown split '" + std::string(s) + "'");
}

struct GenConfig {
    std::size_t num_ids = 40;
    std::size_t imgs_per_id = 10;
    std::size_t num_cams = 2;
    std::size_t height = 48;
    std::size_t width = 16;

    void validate() const {
        if (num_ids < 4) throw ConfigError("gen: num_ids must be >= 4", "num_ids");
        if (num_cams < 2) throw ConfigError("gen: num_cams must be >= 2", "num_cams");
        if (imgs_per_id < 2) throw ConfigError("gen: imgs_per_id must be >= 2", "imgs_per_id");
        if (height < 8 || width < 8) throw ConfigError("gen: image must be at least 8x8", "height");
    }
};

struct CorruptionConfig {
    double severity = 0.0;

    void validate() const {
        if (!(severity >= 0.0 && severity <= 1.0)) throw ConfigError("severity must lie in [0, 1]", "severity");
    }
};

struct Box {
    std::size_t x = 0, y = 0, w = 0, h = 0;
    bool operator==(const Box&) const = default;
};

struct Corruption {
    double offset = 0.0;
    double scale = 1.0;
    std::optional<Box> occlusion;
    std::array<float, 3> occlusion_color{0.f, 0.f, 0.f};

    bool is_identity() const { return offset == 0.0 && scale == 1.0 && !occlusion; }
};

using Rgb = std::array<double, 3>;

struct IdentitySpec {
    std::size_t id = 0;
    Rgb head{}, torso{}, legs{}, stripe{};
    int stripe_code = 0;            // 0 plain, 1 horizontal, 2 vertical, 3 two-tone
    std::array<double, 3> proportions{}; // head, torso, legs height fractions; sum 1
};

struct SampleRecord {
    std::string entry_name;
    Tensor<float> image; // [3 x H x W], values in [0, 1]
    std::size_t identity = 0;
    std::size_t camera = 0;
    Split split = Split::train;
    Corruption corruption;
};

struct ReIdDataset {
    GenConfig gen;
    CorruptionConfig corruption;
    std::uint64_t seed = 0;
    std::vector<SampleRecord> samples; // manifest order

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == s) out.push_back(i);
        return out;
    }

    // Stacked images [N x C x H x W] for the given sample indices.
    Tensor<float> stack(const std::vector<std::size_t>& idx) const {
        if (idx.empty()) throw ShapeError("dataset: cannot stack zero images");
        const Shape& s = samples.at(idx.front()).image.shape();
        std::vector<float> data;
        data.reserve(idx.size() * samples[idx.front()].image.size());
        for (auto i : idx) {
            const auto& img = samples.at(i).image;
            if (img.shape() != s) throw ShapeError("dataset: mixed image shapes " + shape_str(s) + " vs " + shape_str(img.shape()));
            data.insert(data.end(), img.data().begin(), img.data().end());
        }
        Shape out{idx.size()};
        out.insert(out.end(), s.begin(), s.end());
        return Tensor<float>(std::move(out), std::move(data));
    }

    Shape image_shape() const { return samples.empty() ? Shape{} : samples.front().image.shape(); }
};

namespace synth {

inline const std::array<Rgb, 8>& palette() {
    static const std::array<Rgb, 8> p = {{
        {0.85, 0.15, 0.15}, // red
        {0.15, 0.70, 0.20}, // green
        {0.15, 0.25, 0.85}, // blue
        {0.90, 0.85, 0.20}, // yellow
        {0.20, 0.80, 0.85}, // cyan
        {0.80, 0.25, 0.80}, // magenta
        {0.92, 0.92, 0.92}, // white
        {0.12, 0.12, 0.12}, // black
    }};
    return p;
}

inline Rgb jitter(const Rgb& c, Rng& r, double amount) {
    Rgb out;
    for (int i = 0; i < 3; ++i) out[i] = std::clamp(c[i] + r.uniform(-amount, amount), 0.0, 1.0);
    return out;
}

struct CameraModel {
    std::array<double, 3> gain{1, 1, 1};
    double bias = 0.0;
    Rgb background{0.5, 0.5, 0.5};
};

inline CameraModel make_camera(std::size_t cam, const Rng& root) {
    auto r = root.split("camera", cam);
    CameraModel m;
    const double brightness = r.uniform(0.75, 1.25);
    for (auto& g : m.gain) g = brightness * r.uniform(0.88, 1.12);
    m.bias = r.uniform(-0.05, 0.05);
    const double base = r.uniform(0.4, 0.6);
    for (auto& b : m.background) b = std::clamp(base + r.uniform(-0.06, 0.06), 0.0, 1.0);
    return m;
}

// Per-sample nuisance: where the figure stands, how wide it is, what is
// behind it and whether it carries something.
struct Pose {
    std::ptrdiff_t dx = 0;
    std::size_t margin = 2;
    double boundary_shift = 0.0;
    Rgb background{0.5, 0.5, 0.5};
    bool bag = false;
    Rgb bag_color{};
    std::size_t bag_row = 0;
    bool bag_left = false;
};

inline Tensor<float> render_identity(const IdentitySpec& id, const Pose& pose, std::size_t H, std::size_t W) {
    Tensor<float> img(Shape{3, H, W}, 0.f);
    const double fh = static_cast<double>(H);
    const auto head_end = static_cast<std::size_t>(
        std::clamp<double>(std::lround((id.proportions[0] + pose.boundary_shift) * fh), 1.0, fh - 2.0));
    const auto torso_end = static_cast<std::size_t>(std::clamp<double>(
        std::lround((id.proportions[0] + id.proportions[1] + pose.boundary_shift) * fh), double(head_end) + 1.0,
        fh - 1.0));
    const std::size_t margin = std::min(pose.margin, W / 2 - 1);
    const std::size_t head_lo = W * 5 / 16, head_hi = W - W * 5 / 16;
    const std::size_t mid = W / 2, gap = std::max<std::size_t>(1, W / 16);
    const auto sw = static_cast<std::ptrdiff_t>(W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xi = 0; xi < W; ++xi) {
            Rgb c = pose.background;
            const std::ptrdiff_t xs = static_cast<std::ptrdiff_t>(xi) - pose.dx;
            if (xs >= 0 && xs < sw) {
                const auto x = static_cast<std::size_t>(xs);
                if (y < head_end) {
                    if (x >= head_lo && x < head_hi) c = id.head;
                } else if (y < torso_end) {
                    if (x >= margin && x < W - margin) {
                        c = id.torso;
                        const std::size_t ty = y - head_end;
                        const std::size_t th = torso_end - head_end;
                        switch (id.stripe_code) {
                        case 1: if ((ty / 3) % 2 == 1) c = id.stripe; break;
                        case 2: if (((x - margin) / 2) % 2 == 1) c = id.stripe; break;
                        case 3: if (ty >= th / 2) c = id.stripe; break;
                        default: break;
                        }
                    }
                    if (pose.bag && y >= pose.bag_row && y < pose.bag_row + 4) {
                        const bool side = pose.bag_left ? x < margin + 3 : x + margin + 3 >= W;
                        if (side) c = pose.bag_color;
                    }
                } else {
                    const bool left = x >= margin + 1 && x < mid - gap + 1;
                    const bool right = x >= mid + gap - 1 && x + margin + 1 < W;
                    if (left || right) c = id.legs;
                }
            }
            for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * H + y) * W + xi] = static_cast<float>(c[ch]);
        }
    return img;
}

} // namespace synth

// Shift content down by offset*H rows (edge replication), rescale vertically
// about the center, then paint the occlusion box. Output shape is unchanged.
inline Tensor<float> apply_misalignment(const Tensor<float>& image, double offset_fraction, double scale,
                                        const std::optional<Box>& occlusion = std::nullopt,
                                        std::array<float, 3> occlusion_color = {0.f, 0.f, 0.f}) {
    if (image.rank() != 3) throw ShapeError("apply_misalignment: expected [C x H x W], got " + shape_str(image.shape()));
    if (!(offset_fraction >= -0.3 && offset_fraction <= 0.3)) {
        throw ConfigError("apply_misalignment: offset " + std::to_string(offset_fraction) + " outside [-0.3, 0.3]",
                          "offset");
    }
    if (!(scale >= 0.7 && scale <= 1.3)) {
        throw ConfigError("apply_misalignment: scale " + std::to_string(scale) + " outside [0.7, 1.3]", "scale");
    }
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (occlusion) {
        const auto& b = *occlusion;
        if (b.w == 0 || b.h == 0 || b.x + b.w > W || b.y + b.h > H) {
            throw ConfigError("apply_misalignment: occlusion box outside the image", "occlusion");
        }
    }
    const auto shift = static_cast<std::ptrdiff_t>(std::lround(offset_fraction * static_cast<double>(H)));
    const auto last = static_cast<std::ptrdiff_t>(H) - 1;
    std::vector<std::size_t> src(H);
    for (std::size_t y = 0; y < H; ++y) {
        const double half = static_cast<double>(H) / 2.0;
        auto scaled = static_cast<std::ptrdiff_t>(std::floor((static_cast<double>(y) + 0.5 - half) / scale + half));
        scaled = std::clamp<std::ptrdiff_t>(scaled, 0, last);
        src[y] = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(scaled - shift, 0, last));
    }
    Tensor<float> out(image.shape(), 0.f);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            std::copy_n(&image[(c * H + src[y]) * W], W, &out[(c * H + y) * W]);
    if (occlusion) {
        const auto& b = *occlusion;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = b.y; y < b.y + b.h; ++y)
                for (std::size_t x = b.x; x < b.x + b.w; ++x) out[(c * H + y) * W + x] = occlusion_color[c % 3];
    }
    return out;
}

// Severity s maps to: |offset| <= 0.3 s, scale in [1 - 0.3 s, 1 + 0.3 s],
// occlusion with probability 0.5 s covering at most 0.25 s of the image.
// The same uniforms are used at every severity.
inline Corruption draw_corruption(double severity, std::size_t H, std::size_t W, Rng r) {
    const double u_off = r.uniform(-1.0, 1.0);
    const double u_scale = r.uniform(-1.0, 1.0);
    const double u_occ = r.uniform();
    const double u_area = r.uniform(0.3, 1.0);
    const double u_aspect = r.uniform(-1.0, 1.0);
    const double u_x = r.uniform();
    const double u_y = r.uniform();
    std::array<float, 3> color{static_cast<float>(r.uniform()), static_cast<float>(r.uniform()),
                               static_cast<float>(r.uniform())};
    Corruption c;
    if (severity <= 0.0) return c;
    c.offset = 0.3 * severity * u_off;
    c.scale = 1.0 + 0.3 * severity * u_scale;
    if (u_occ < 0.5 * severity) {
        const double area_px = 0.25 * severity * u_area * static_cast<double>(H * W);
        const double aspect = std::exp(0.7 * u_aspect); // w/h
        auto w = static_cast<std::size_t>(std::clamp<double>(std::floor(std::sqrt(area_px * aspect)), 1.0, double(W)));
        auto h = static_cast<std::size_t>(std::clamp<double>(std::floor(area_px / static_cast<double>(w)), 1.0, double(H)));
        if (static_cast<double>(w * h) <= area_px) {
            Box b;
            b.w = w;
            b.h = h;
            b.x = static_cast<std::size_t>(std::floor(u_x * static_cast<double>(W - w + 1)));
            b.y = static_cast<std::size_t>(std::floor(u_y * static_cast<double>(H - h + 1)));
            c.occlusion = b;
            c.occlusion_color = color;
        }
    }
    return c;
}

struct SynthOptions {
    double noise_sigma = 0.03;
    double identity_color_jitter = 0.04;
    double sample_brightness_jitter = 0.15;
    double background_jitter = 0.25;
    std::size_t max_shift = 2;
    double boundary_jitter = 0.03;
    double bag_probability = 0.3;
};

inline synth::Pose draw_pose(const synth::CameraModel& cam, std::size_t H, std::size_t W, Rng& r,
                             const SynthOptions& opt) {
    synth::Pose p;
    const auto span = static_cast<std::ptrdiff_t>(2 * opt.max_shift + 1);
    p.dx = static_cast<std::ptrdiff_t>(r.below(static_cast<std::uint64_t>(span))) -
           static_cast<std::ptrdiff_t>(opt.max_shift);
    p.margin = std::max<std::size_t>(1, W / 16) * (1 + r.below(3));
    p.boundary_shift = r.uniform(-opt.boundary_jitter, opt.boundary_jitter);
    for (std::size_t c = 0; c < 3; ++c)
        p.background[c] = std::clamp(cam.background[c] + r.uniform(-opt.background_jitter, opt.background_jitter), 0.0, 1.0);
    p.bag = r.uniform() < opt.bag_probability;
    p.bag_color = synth::palette()[r.below(synth::palette().size())];
    p.bag_row = static_cast<std::size_t>(r.uniform(0.3, 0.5) * static_cast<double>(H));
    p.bag_left = r.uniform() < 0.5;
    return p;
}

inline std::vector<IdentitySpec> make_identities(std::size_t count, const Rng& root, double color_jitter = 0.04) {
    std::vector<IdentitySpec> ids;
    std::set<std::tuple<int, int, int, int, int>> used;
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t attempt = 0;; ++attempt) {
            if (attempt == 1000) throw ConfigError("gen: cannot draw distinct identities", "num_ids");
            auto r = root.split("identity", i * 1000 + attempt);
            const auto& pal = synth::palette();
            const int h = static_cast<int>(r.below(pal.size()));
            const int t = static_cast<int>(r.below(pal.size()));
            int l = static_cast<int>(r.below(pal.size() - 1));
            if (l >= t) ++l; // legs differ from torso
            const int code = static_cast<int>(r.below(4));
            int s = static_cast<int>(r.below(pal.size() - 1));
            if (s >= t) ++s;
            const auto key = std::make_tuple(h, t, l, code, code == 0 ? -1 : s);
            if (used.count(key)) continue;
            used.insert(key);
            IdentitySpec spec;
            spec.id = i;
            spec.head = synth::jitter(pal[static_cast<std::size_t>(h)], r, color_jitter);
            spec.torso = synth::jitter(pal[static_cast<std::size_t>(t)], r, color_jitter);
            spec.legs = synth::jitter(pal[static_cast<std::size_t>(l)], r, color_jitter);
            spec.stripe = synth::jitter(pal[static_cast<std::size_t>(s)], r, color_jitter);
            spec.stripe_code = code;
            const double head = r.uniform(0.15, 0.22);
            const double torso = r.uniform(0.34, 0.44);
            spec.proportions = {head, torso, 1.0 - head - torso};
            ids.push_back(spec);
            break;
        }
    }
    return ids;
}

// Renders one sample: identity in a random pose -> camera transform ->
// corruption -> noise. `r` drives everything except the corruption, so the
// same sample can be rendered at several severities.
inline Tensor<float> render_sample(const IdentitySpec& id, const synth::CameraModel& cam, const Corruption& corr,
                                   std::size_t H, std::size_t W, Rng r, const SynthOptions& opt = {}) {
    const auto pose = draw_pose(cam, H, W, r, opt);
    auto img = synth::render_identity(id, pose, H, W);
    const double jit = 1.0 + r.uniform(-opt.sample_brightness_jitter, opt.sample_brightness_jitter);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < H * W; ++i) {
            auto& v = img[c * H * W + i];
            v = static_cast<float>(std::clamp(v * cam.gain[c] * jit + cam.bias, 0.0, 1.0));
        }
    img = apply_misalignment(img, corr.offset, corr.scale, corr.occlusion, corr.occlusion_color);
    for (auto& v : img.data()) v = static_cast<float>(std::clamp(v + opt.noise_sigma * r.normal(), 0.0, 1.0));
    return img;
}

inline ReIdDataset generate_dataset(const GenConfig& gen, const CorruptionConfig& corruption, std::uint64_t seed,
                                    const SynthOptions& opt = {}) {
    gen.validate();
    corruption.validate();
    const Rng root(seed);
    const auto ids = make_identities(gen.num_ids, root.split("identities"), opt.identity_color_jitter);
    std::vector<synth::CameraModel> cams;
    for (std::size_t c = 0; c < gen.num_cams; ++c) cams.push_back(synth::make_camera(c, root));

    const std::size_t num_train = gen.num_ids / 2;
    ReIdDataset ds;
    ds.gen = gen;
    ds.corruption = corruption;
    ds.seed = seed;
    for (std::size_t id = 0; id < gen.num_ids; ++id) {
        const bool is_train = id < num_train;
        std::vector<std::size_t> cam_of(gen.imgs_per_id);
        for (std::size_t attempt = 0;; ++attempt) {
            if (attempt == 100) {
                throw ConfigError("gen: identity " + std::to_string(id) +
                                      " has no feasible camera assignment after 100 attempts",
                                  "num_cams");
            }
            auto r = root.split("camera-assign", id * 100 + attempt);
            std::vector<std::size_t> count(gen.num_cams, 0);
            for (auto& c : cam_of) {
                c = r.below(gen.num_cams);
                ++count[c];
            }
            if (is_train) break;
            // Each camera used must keep a gallery image after its query is taken.
            std::size_t used = 0;
            bool ok = true;
            for (auto n : count) {
                if (n > 0) ++used;
                if (n == 1) ok = false;
            }
            if (ok && used >= 2) break;
        }
        std::map<std::size_t, std::size_t> query_of_cam;
        if (!is_train) {
            auto r = root.split("query", id);
            std::map<std::size_t, std::vector<std::size_t>> by_cam;
            for (std::size_t j = 0; j < gen.imgs_per_id; ++j) by_cam[cam_of[j]].push_back(j);
            for (auto& [c, js] : by_cam) query_of_cam[c] = js[r.below(js.size())];
        }
        for (std::size_t j = 0; j < gen.imgs_per_id; ++j) {
            const std::size_t idx = id * gen.imgs_per_id + j;
            SampleRecord rec;
            rec.entry_name = "img_" + std::string(6 - std::min<std::size_t>(6, std::to_string(idx).size()), '0') +
                             std::to_string(idx);
            rec.identity = id;
            rec.camera = cam_of[j];
            if (is_train) rec.split = Split::train;
            else rec.split = query_of_cam[cam_of[j]] == j ? Split::query : Split::gallery;
            rec.corruption = draw_corruption(corruption.severity, gen.height, gen.width, root.split("corruption", idx));
            rec.image = render_sample(ids[id], cams[rec.camera], rec.corruption, gen.height, gen.width,
                                      root.split("sample", idx), opt);
            ds.samples.push_back(std::move(rec));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk form: train/query/gallery .pyrt containers + manifest.csv + dataset.ini

inline std::string manifest_csv(const ReIdDataset& ds) {
    std::ostringstream os;
    os << "entry_name,identity,camera,split,offset,scale,occ_x,occ_y,occ_w,occ_h\n";
    os.precision(17);
    for (const auto& s : ds.samples) {
        os << s.entry_name << ',' << s.identity << ',' << s.camera << ',' << split_name(s.split) << ','
           << s.corruption.offset << ',' << s.corruption.scale << ',';
        if (s.corruption.occlusion) {
            const auto& b = *s.corruption.occlusion;
            os << b.x << ',' << b.y << ',' << b.w << ',' << b.h;
        } else {
            os << ",,,";
        }
        os << '\n';
    }
    return os.str();
}

inline std::uint64_t dataset_fingerprint(const ReIdDataset& ds) {
    std::string key = manifest_csv(ds) + shape_str(ds.image_shape());
    return fnv1a64(key);
}

inline void save_dataset(const ReIdDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (Split sp : {Split::train, Split::query, Split::gallery}) {
        TensorArchive ar;
        for (const auto& s : ds.samples)
            if (s.split == sp) ar.put(s.entry_name, s.image);
        ar.save(dir / (std::string(split_name(sp)) + ".pyrt"));
    }
    std::ofstream(dir / "manifest.csv", std::ios::trunc) << manifest_csv(ds);
    std::ofstream ini(dir / "dataset.ini", std::ios::trunc);
    ini << "num_ids=" << ds.gen.num_ids << "\nimgs_per_id=" << ds.gen.imgs_per_id << "\nnum_cams=" << ds.gen.num_cams
        << "\nheight=" << ds.gen.height << "\nwidth=" << ds.gen.width << "\nseverity=" << ds.corruption.severity
        << "\nseed=" << ds.seed << "\n";
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}
} // namespace detail

inline ReIdDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.csv");
    if (!mf) throw FormatError("dataset: missing manifest.csv in '" + dir.string() + "'");
    ReIdDataset ds;
    if (std::ifstream ini(dir / "dataset.ini"); ini) {
        std::string line;
        while (std::getline(ini, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const auto key = line.substr(0, eq);
            const auto val = line.substr(eq + 1);
            if (key == "num_ids") ds.gen.num_ids = std::stoul(val);
            else if (key == "imgs_per_id") ds.gen.imgs_per_id = std::stoul(val);
            else if (key == "num_cams") ds.gen.num_cams = std::stoul(val);
            else if (key == "height") ds.gen.height = std::stoul(val);
            else if (key == "width") ds.gen.width = std::stoul(val);
            else if (key == "severity") ds.corruption.severity = std::stod(val);
            else if (key == "seed") ds.seed = std::stoull(val);
        }
    }
    std::map<Split, TensorArchive> archives;
    for (Split sp : {Split::train, Split::query, Split::gallery}) {
        const auto path = dir / (std::string(split_name(sp)) + ".pyrt");
        if (std::filesystem::exists(path)) archives.emplace(sp, TensorArchive::load(path));
    }
    std::string line;
    std::getline(mf, line);
    if (line.rfind("entry_name,identity,camera,split", 0) != 0) {
        throw FormatError("dataset: manifest.csv has an unexpected header");
    }
    std::size_t row = 1;
    while (std::getline(mf, line)) {
        ++row;
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() < 4) throw FormatError("dataset: manifest row " + std::to_string(row) + " is malformed");
        try {
            SampleRecord s;
            s.entry_name = f[0];
            s.identity = std::stoul(f[1]);
            s.camera = std::stoul(f[2]);
            s.split = parse_split(f[3]);
            if (f.size() >= 6 && !f[4].empty()) s.corruption.offset = std::stod(f[4]);
            if (f.size() >= 6 && !f[5].empty()) s.corruption.scale = std::stod(f[5]);
            if (f.size() >= 10 && !f[6].empty())
                s.corruption.occlusion = Box{std::stoul(f[6]), std::stoul(f[7]), std::stoul(f[8]), std::stoul(f[9])};
            auto it = archives.find(s.split);
            if (it == archives.end()) throw FormatError("missing container for split " + std::string(f[3]));
            s.image = it->second.get<float>(s.entry_name);
            ds.samples.push_back(std::move(s));
        } catch (const std::invalid_argument&) {
            throw FormatError("dataset: manifest row " + std::to_string(row) + " has a non-numeric field");
        } catch (const FormatError& e) {
            throw FormatError("dataset: manifest row " + std::to_string(row) + ": " + e.what());
        }
    }
    return ds;
}

// Train split with identity labels remapped to 0..K-1 in ascending id order.
struct TrainView {
    std::vector<std::size_t> sample_index; // into ReIdDataset::samples
    LabeledSplit split;
    std::size_t num_classes = 0;
};

inline TrainView train_view(const ReIdDataset& ds) {
    TrainView v;
    v.sample_index = ds.indices(Split::train);
    std::map<std::size_t, std::size_t> remap;
    for (auto i : v.sample_index) remap.emplace(ds.samples[i].identity, 0);
    std::size_t next = 0;
    for (auto& [id, lbl] : remap) lbl = next++;
    for (auto i : v.sample_index) {
        v.split.labels.push_back(remap[ds.samples[i].identity]);
        v.split.cameras.push_back(ds.samples[i].camera);
    }
    v.num_classes = remap.size();
    return v;
}

} // namespace pyreid
