/**
 * Client-side heatmap blending for the alpha slider.
 *
 * The raw grayscale heatmap PNG from the service is color-mapped and
 * blended over the X-ray locally so alpha changes need no round trip;
 * the server's pre-blended overlay PNG remains available as a fallback.
 */

export interface Rgb {
    r: number;
    g: number;
    b: number;
}

const JET_STOPS: Array<[number, number, number, number]> = [
    [0.0, 0, 0, 143],
    [0.125, 0, 0, 255],
    [0.375, 0, 255, 255],
    [0.625, 255, 255, 0],
    [0.875, 255, 0, 0],
    [1.0, 128, 0, 0],
];

/** Jet-style color for one intensity in [0, 1]. */
export function colormap(value: number): Rgb {
    const v = Math.min(1, Math.max(0, value));
    for (let k = 0; k < JET_STOPS.length - 1; k++) {
        const [t0, r0, g0, b0] = JET_STOPS[k];
        const [t1, r1, g1, b1] = JET_STOPS[k + 1];
        if (v <= t1) {
            const f = (v - t0) / (t1 - t0);
            return {
                r: Math.round(r0 + f * (r1 - r0)),
                g: Math.round(g0 + f * (g1 - g0)),
                b: Math.round(b0 + f * (b1 - b0)),
            };
        }
    }
    return { r: 128, g: 0, b: 0 };
}

/**
 * Blend a color-mapped heatmap into grayscale image pixels.
 * Both buffers are RGBA; heat intensity is taken from the red channel
 * of the raw grayscale heatmap.
 */
export function blendHeatmap(
    image: Uint8ClampedArray,
    rawHeat: Uint8ClampedArray,
    alpha: number,
    out?: Uint8ClampedArray,
): Uint8ClampedArray {
    const result = out ?? new Uint8ClampedArray(image.length);
    for (let i = 0; i < image.length; i += 4) {
        const heat = colormap(rawHeat[i] / 255);
        result[i] = (1 - alpha) * image[i] + alpha * heat.r;
        result[i + 1] = (1 - alpha) * image[i + 1] + alpha * heat.g;
        result[i + 2] = (1 - alpha) * image[i + 2] + alpha * heat.b;
        result[i + 3] = 255;
    }
    return result;
}
