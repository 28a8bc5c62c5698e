#pragma once

// Independent reference implementations used as test oracles. Deliberately
// naive: breadth-first labelling over a full label image, pixel-set output.

#include "sammed/image.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <set>
#include <utility>
#include <vector>

namespace oracle {

using PixelSet = std::set<std::pair<int, int>>; // (y, x)

// Components of (label == cls), each as a pixel set, ordered by the raster
// position of their first pixel.
inline std::vector<PixelSet> components(const std::vector<std::int32_t>& labels, int h, int w, bool eight,
                                        const std::function<bool(std::int32_t)>& member) {
    std::vector<int> comp(labels.size(), -1);
    std::vector<PixelSet> out;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!member(labels[y * w + x]) || comp[y * w + x] >= 0) continue;
            const int id = static_cast<int>(out.size());
            out.emplace_back();
            std::deque<std::pair<int, int>> q{{y, x}};
            comp[y * w + x] = id;
            while (!q.empty()) {
                auto [cy, cx] = q.front();
                q.pop_front();
                out[id].insert({cy, cx});
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        if (!eight && dy != 0 && dx != 0) continue;
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                        if (!member(labels[ny * w + nx]) || comp[ny * w + nx] >= 0) continue;
                        comp[ny * w + nx] = id;
                        q.push_back({ny, nx});
                    }
            }
        }
    return out;
}

inline PixelSet pixels_of(const sammed::BinaryMask& m) {
    PixelSet s;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(y, x)) s.insert({y, x});
    return s;
}

// Keep iff area / (h w) > min_area / target^2, by cross-multiplication.
inline bool keep_area(std::size_t area, int h, int w, int min_area = 100, int target = 256) {
    return static_cast<unsigned long long>(area) * target * target >
           static_cast<unsigned long long>(min_area) * h * w;
}

inline double dice(const sammed::BinaryMask& a, const sammed::BinaryMask& b) {
    int both = 0, na = 0, nb = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            na += a.at(y, x) != 0;
            nb += b.at(y, x) != 0;
            both += a.at(y, x) != 0 && b.at(y, x) != 0;
        }
    if (na + nb == 0) return 1.0;
    return 2.0 * both / (na + nb);
}

} // namespace oracle
