/**
 * Mask overlay compositing.
 *
 * The service exposes each instance mask as a white-on-black PNG. The UI
 * decodes those into `Bitmap` values (one byte per pixel, nonzero means
 * masked) and composites them into a single RGBA buffer that is drawn on a
 * canvas above the later image. All of the pixel math lives here as pure
 * functions so it can be tested without a real canvas.
 */

import type { InstanceView } from "./types.js";

/** Decoded mask: row-major, one byte per pixel, nonzero = inside the mask. */
export interface Bitmap {
  width: number;
  height: number;
  data: Uint8Array;
}

export interface OverlayLayer {
  instanceId: string;
  changeClass: number;
  bitmap: Bitmap;
}

export interface CompositeOptions {
  /** Change classes whose layers are drawn. */
  enabledClasses: ReadonlySet<number>;
  /** Overlay opacity in [0, 1] applied to every masked pixel. */
  opacity: number;
  /** Instance drawn with boosted opacity, if any. */
  highlightId?: string | null;
}

/**
 * Fixed colour per change class. One colour maps to exactly one class:
 * red for object changes, green for appearance changes, blue for
 * regions that left the common view.
 */
export const CLASS_COLORS: Record<number, readonly [number, number, number]> = {
  1: [214, 40, 40],
  2: [46, 160, 67],
  3: [37, 99, 235],
};

const FALLBACK_COLOR: readonly [number, number, number] = [128, 128, 128];

/** Extra opacity applied to the highlighted instance, clamped to 1. */
export const HIGHLIGHT_BOOST = 0.3;

export function classColor(changeClass: number | null): readonly [number, number, number] {
  if (changeClass !== null && changeClass in CLASS_COLORS) {
    return CLASS_COLORS[changeClass]!;
  }
  return FALLBACK_COLOR;
}

export function cssColor(changeClass: number | null): string {
  const [r, g, b] = classColor(changeClass);
  return `rgb(${r}, ${g}, ${b})`;
}

function clamp01(value: number): number {
  return Math.min(1, Math.max(0, value));
}

/**
 * Colourize a single layer into an RGBA buffer of length width*height*4.
 * Pixels outside the mask stay fully transparent.
 */
export function colorizeLayer(
  layer: OverlayLayer,
  opacity: number,
): Uint8ClampedArray<ArrayBuffer> {
  const { width, height, data } = layer.bitmap;
  const [r, g, b] = classColor(layer.changeClass);
  const alpha = Math.round(clamp01(opacity) * 255);
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < width * height; i += 1) {
    if (data[i]) {
      out[i * 4] = r;
      out[i * 4 + 1] = g;
      out[i * 4 + 2] = b;
      out[i * 4 + 3] = alpha;
    }
  }
  return out;
}

/**
 * Composite the enabled layers into one RGBA buffer.
 *
 * Layers are painted in list order and a later layer overwrites earlier
 * ones wherever its mask covers a pixel, which matches how the annotation
 * pipeline resolves overlaps when it flattens instances into a label map.
 * The highlighted instance gets `opacity + HIGHLIGHT_BOOST`.
 */
export function compositeOverlay(
  width: number,
  height: number,
  layers: readonly OverlayLayer[],
  options: CompositeOptions,
): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(width * height * 4);
  for (const layer of layers) {
    if (!options.enabledClasses.has(layer.changeClass)) {
      continue;
    }
    if (layer.bitmap.width !== width || layer.bitmap.height !== height) {
      throw new Error(
        `layer ${layer.instanceId} is ${layer.bitmap.width}x${layer.bitmap.height}, ` +
          `expected ${width}x${height}`,
      );
    }
    const boosted = layer.instanceId === options.highlightId;
    const opacity = clamp01(options.opacity + (boosted ? HIGHLIGHT_BOOST : 0));
    const [r, g, b] = classColor(layer.changeClass);
    const alpha = Math.round(opacity * 255);
    const mask = layer.bitmap.data;
    for (let i = 0; i < width * height; i += 1) {
      if (mask[i]) {
        out[i * 4] = r;
        out[i * 4 + 1] = g;
        out[i * 4 + 2] = b;
        out[i * 4 + 3] = alpha;
      }
    }
  }
  return out;
}

/** Loads and decodes mask PNGs. Injected so tests can script bitmaps. */
export interface BitmapSource {
  load(url: string): Promise<Bitmap>;
}

/**
 * Browser implementation: decode through an Image element and an offscreen
 * canvas. Any pixel with a nonzero red channel counts as masked, which is
 * how the service encodes instance masks.
 */
export class CanvasBitmapSource implements BitmapSource {
  // TODO: cache decoded bitmaps per pair once review sets get large enough
  // for repeated toggling to feel slow.
  load(url: string): Promise<Bitmap> {
    return new Promise((resolve, reject) => {
      const image = new Image();
      image.onload = () => {
        const canvas = document.createElement("canvas");
        canvas.width = image.naturalWidth;
        canvas.height = image.naturalHeight;
        const ctx = canvas.getContext("2d");
        if (!ctx) {
          reject(new Error("2d canvas context unavailable"));
          return;
        }
        ctx.drawImage(image, 0, 0);
        const rgba = ctx.getImageData(0, 0, canvas.width, canvas.height).data;
        const data = new Uint8Array(canvas.width * canvas.height);
        for (let i = 0; i < data.length; i += 1) {
          data[i] = rgba[i * 4]! > 0 ? 1 : 0;
        }
        resolve({ width: canvas.width, height: canvas.height, data });
      };
      image.onerror = () => reject(new Error(`failed to load ${url}`));
      image.src = url;
    });
  }
}

/** Distinct change classes present in a pair, ascending. */
export function classesPresent(instances: readonly InstanceView[]): number[] {
  const seen = new Set<number>();
  for (const inst of instances) {
    if (inst.change_class !== null) {
      seen.add(inst.change_class);
    }
  }
  return [...seen].sort((a, b) => a - b);
}
