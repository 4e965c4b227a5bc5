/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_get_overlay_height: (a: number) => number;
export const __wbg_get_overlay_label: (a: number) => number;
export const __wbg_get_overlay_marked: (a: number) => number;
export const __wbg_get_overlay_predicted: (a: number) => number;
export const __wbg_get_overlay_width: (a: number) => number;
export const __wbg_overlay_free: (a: number, b: number) => void;
export const __wbg_session_free: (a: number, b: number) => void;
export const __wbg_set_overlay_height: (a: number, b: number) => void;
export const __wbg_set_overlay_label: (a: number, b: number) => void;
export const __wbg_set_overlay_marked: (a: number, b: number) => void;
export const __wbg_set_overlay_predicted: (a: number, b: number) => void;
export const __wbg_set_overlay_width: (a: number, b: number) => void;
export const overlay_pixels: (a: number) => [number, number];
export const pca_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const session_accuracy: (a: number) => number;
export const session_iteration: (a: number) => number;
export const session_new: (a: number, b: number) => [number, number, number];
export const session_overlay: (a: number, b: number, c: number) => [number, number, number];
export const session_train: (a: number, b: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
